#pragma once

// Bag-of-words softmax classifier over the closed vocabulary. Serves as the
// implicit-attribute annotation probe and as the classifier-mode relevance
// judge in evaluation.

#include <vector>

#include "mcg/corpus.hpp"
#include "mcg/schema.hpp"

namespace mcg::corpus {

struct BowTrainConfig {
    int epochs = 60;
    double lr = 0.5;
    std::uint64_t seed = 0;
};

class BowClassifier {
public:
    BowClassifier() = default;
    BowClassifier(int aspect, int n_classes, const Vocabulary& vocab);

    // Trains on (text, label) pairs with plain softmax-regression gradient
    // descent over mean count features.
    void train(const std::vector<std::pair<std::vector<std::string>, int>>& data,
               const BowTrainConfig& cfg);

    int predict(const std::vector<std::string>& text) const;
    std::vector<double> predict_proba(const std::vector<std::string>& text) const;

    int aspect() const { return aspect_; }
    bool trained() const { return trained_; }

private:
    std::vector<double> features(const std::vector<std::string>& text) const;

    int aspect_ = -1;
    int n_classes_ = 0;
    int vocab_size_ = 0;
    const Vocabulary* vocab_ = nullptr;
    std::vector<double> w_;  // [n_classes, vocab]
    std::vector<double> b_;  // [n_classes]
    bool trained_ = false;
};

// Probe for annotating `aspect`, trained on the samples explicitly labeled
// with that aspect (a split disjoint from anything it will annotate).
BowClassifier train_annotation_probe(const std::vector<Sample>& samples, int aspect,
                                     const Vocabulary& vocab, const BowTrainConfig& cfg = {});

// Relevance classifier for `aspect`, trained on any sample carrying a label
// for it (explicit or implicit).
BowClassifier train_eval_classifier(const std::vector<Sample>& samples, int aspect,
                                    const AttributeSchema& schema, const Vocabulary& vocab,
                                    const BowTrainConfig& cfg = {});

}  // namespace mcg::corpus

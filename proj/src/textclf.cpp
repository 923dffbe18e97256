#include "mcg/textclf.hpp"

#include <cmath>
#include <stdexcept>

#include "mcg/autodiff.hpp"

namespace mcg::corpus {

BowClassifier::BowClassifier(int aspect, int n_classes, const Vocabulary& vocab)
    : aspect_(aspect), n_classes_(n_classes), vocab_size_(vocab.size()), vocab_(&vocab) {
    w_.assign(static_cast<std::size_t>(n_classes_) * vocab_size_, 0.0);
    b_.assign(static_cast<std::size_t>(n_classes_), 0.0);
}

std::vector<double> BowClassifier::features(const std::vector<std::string>& text) const {
    std::vector<double> f(static_cast<std::size_t>(vocab_size_), 0.0);
    for (const std::string& tok : text) {
        f[static_cast<std::size_t>(vocab_->id(tok))] += 1.0;
    }
    if (!text.empty()) {
        for (double& x : f) {
            x /= static_cast<double>(text.size());
        }
    }
    return f;
}

void BowClassifier::train(const std::vector<std::pair<std::vector<std::string>, int>>& data,
                          const BowTrainConfig& cfg) {
    if (data.empty()) {
        throw std::invalid_argument("BowClassifier::train: empty training set");
    }
    std::vector<std::vector<double>> feats;
    feats.reserve(data.size());
    for (const auto& [text, label] : data) {
        if (label < 0 || label >= n_classes_) {
            throw std::invalid_argument("BowClassifier::train: label out of range");
        }
        feats.push_back(features(text));
    }
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = seeded_rng(cfg.seed, "bow");

    std::vector<double> probs(static_cast<std::size_t>(n_classes_));
    std::vector<double> logits(static_cast<std::size_t>(n_classes_));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t oi : order) {
            const auto& f = feats[oi];
            const int y = data[oi].second;
            for (int c = 0; c < n_classes_; ++c) {
                double z = b_[static_cast<std::size_t>(c)];
                const double* wc = w_.data() + static_cast<std::size_t>(c) * vocab_size_;
                for (int j = 0; j < vocab_size_; ++j) {
                    if (f[static_cast<std::size_t>(j)] != 0.0) {
                        z += wc[j] * f[static_cast<std::size_t>(j)];
                    }
                }
                logits[static_cast<std::size_t>(c)] = z;
            }
            nn::softmax_row(logits.data(), probs.data(), n_classes_);
            for (int c = 0; c < n_classes_; ++c) {
                const double err = probs[static_cast<std::size_t>(c)] - (c == y ? 1.0 : 0.0);
                double* wc = w_.data() + static_cast<std::size_t>(c) * vocab_size_;
                for (int j = 0; j < vocab_size_; ++j) {
                    if (f[static_cast<std::size_t>(j)] != 0.0) {
                        wc[j] -= cfg.lr * err * f[static_cast<std::size_t>(j)];
                    }
                }
                b_[static_cast<std::size_t>(c)] -= cfg.lr * err;
            }
        }
    }
    trained_ = true;
}

std::vector<double> BowClassifier::predict_proba(const std::vector<std::string>& text) const {
    if (!trained_) {
        throw std::runtime_error("BowClassifier: classifier is not trained");
    }
    const auto f = features(text);
    std::vector<double> logits(static_cast<std::size_t>(n_classes_));
    for (int c = 0; c < n_classes_; ++c) {
        double z = b_[static_cast<std::size_t>(c)];
        const double* wc = w_.data() + static_cast<std::size_t>(c) * vocab_size_;
        for (int j = 0; j < vocab_size_; ++j) {
            z += wc[j] * f[static_cast<std::size_t>(j)];
        }
        logits[static_cast<std::size_t>(c)] = z;
    }
    std::vector<double> probs(static_cast<std::size_t>(n_classes_));
    nn::softmax_row(logits.data(), probs.data(), n_classes_);
    return probs;
}

int BowClassifier::predict(const std::vector<std::string>& text) const {
    const auto p = predict_proba(text);
    int best = 0;
    for (int c = 1; c < n_classes_; ++c) {
        if (p[static_cast<std::size_t>(c)] > p[static_cast<std::size_t>(best)]) {
            best = c;
        }
    }
    return best;
}

BowClassifier train_annotation_probe(const std::vector<Sample>& samples, int aspect,
                                     const Vocabulary& vocab, const BowTrainConfig& cfg) {
    std::vector<std::pair<std::vector<std::string>, int>> data;
    int n_classes = 0;
    for (const Sample& s : samples) {
        if (s.explicit_aspect == aspect) {
            data.emplace_back(s.text, s.explicit_attr);
            n_classes = std::max(n_classes, s.explicit_attr + 1);
        }
    }
    if (data.empty()) {
        throw std::invalid_argument("train_annotation_probe: no explicitly labeled samples");
    }
    BowClassifier clf(aspect, n_classes, vocab);
    clf.train(data, cfg);
    return clf;
}

BowClassifier train_eval_classifier(const std::vector<Sample>& samples, int aspect,
                                    const AttributeSchema& schema, const Vocabulary& vocab,
                                    const BowTrainConfig& cfg) {
    std::vector<std::pair<std::vector<std::string>, int>> data;
    for (const Sample& s : samples) {
        if (s.explicit_aspect == aspect) {
            data.emplace_back(s.text, s.explicit_attr);
        } else if (auto it = s.implicit_attrs.find(aspect); it != s.implicit_attrs.end()) {
            data.emplace_back(s.text, it->second);
        }
    }
    if (data.empty()) {
        throw std::invalid_argument("train_eval_classifier: no labeled samples for the aspect");
    }
    BowClassifier clf(aspect, schema.n_attrs(aspect), vocab);
    clf.train(data, cfg);
    return clf;
}

}  // namespace mcg::corpus

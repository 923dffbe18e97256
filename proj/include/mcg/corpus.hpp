#pragma once

// Synthetic multi-aspect corpus: generation with controlled attribute
// correlation imbalance, implicit-label annotation, index sets, and the
// line-delimited corpus file format.

#include <array>
#include <map>
#include <string>
#include <vector>

#include "mcg/schema.hpp"

namespace mcg::corpus {

struct Sample {
    int id = 0;
    std::vector<std::string> text;
    int explicit_aspect = 0;
    int explicit_attr = 0;
    std::map<int, int> implicit_attrs;  // implicit aspect -> attribute
    enum class Origin { Generated, Annotated } origin = Origin::Generated;

    bool operator==(const Sample&) const = default;
};

// Per-aspect, per-attribute, and per-(explicit, implicit) cell index sets.
// Membership is by explicit label; cells additionally key on an implicit
// label. All sets are sorted by sample id.
struct IndexSets {
    int n_aspects = 0;
    std::vector<std::vector<int>> by_aspect;                // I^t
    std::vector<std::vector<std::vector<int>>> by_attr;     // I^t_a
    // cell key: (explicit aspect, explicit attr, implicit aspect, implicit attr)
    std::map<std::array<int, 4>, std::vector<int>> cells;

    const std::vector<int>& aspect_set(int t) const { return by_aspect.at(static_cast<std::size_t>(t)); }
    const std::vector<int>& attr_set(int t, int a) const {
        return by_attr.at(static_cast<std::size_t>(t)).at(static_cast<std::size_t>(a));
    }
    const std::vector<int>& cell(int t, int a, int k, int b) const;
    bool has_cell(int t, int a, int k, int b) const {
        return cells.count({t, a, k, b}) > 0;
    }
};

// Generates the corpus described by the schema. Every aspect contributes
// per_attr_count explicitly labeled samples per attribute; samples of
// explicit-labeled aspects additionally carry a gold implicit label for the
// schema's implicit-annotated aspect, with per-attribute cell counts realizing
// `ratio` (rounding remainder goes to the majority cell). Texts are 8-16
// tokens with two markers per expressed attribute plus fillers, fully
// determined by `seed`.
std::vector<Sample> build_synthetic_corpus(const AttributeSchema& schema, int per_attr_count,
                                           std::pair<double, double> ratio, std::uint64_t seed);

// Gold implicit label for `aspect`, recovered exactly from planted markers.
int gold_label(const AttributeSchema& schema, const Sample& s, int aspect);

// Removes implicit labels of `aspect`, as a probe-annotation precondition.
std::vector<Sample> strip_implicit(std::vector<Sample> samples, int aspect);

class BowClassifier;  // textclf.hpp

enum class AnnotateMode { Gold, Probe };

// Assigns the implicit label of `aspect` to every sample whose explicit
// aspect differs from it. Gold mode copies the generator's labels (recovered
// from markers); Probe mode uses the classifier's argmax. Samples already
// labeled for `aspect` are rejected.
std::vector<Sample> annotate_implicit(const std::vector<Sample>& samples, int aspect,
                                      AnnotateMode mode, const AttributeSchema& schema,
                                      const BowClassifier* probe = nullptr);

// Builds index sets; rejects duplicate ids. Ordering is by sample id.
IndexSets index_corpus(const std::vector<Sample>& samples);

struct ImbalanceRow {
    int explicit_aspect;
    int explicit_attr;
    int implicit_aspect;
    int implicit_attr;
    int count;
    double proportion;  // within (explicit aspect, explicit attr)
};

// One row per populated cell, with within-attribute proportions.
std::vector<ImbalanceRow> imbalance_report(const IndexSets& index);

std::string format_imbalance_report(const std::vector<ImbalanceRow>& rows,
                                    const AttributeSchema& schema);

// ----------------------------------------------------------------------------
// Corpus file: one JSON header line (schema, vocabulary, build parameters),
// then one JSON record per sample. Serialization is canonical, so files
// round-trip bit-exactly.

struct CorpusFile {
    AttributeSchema schema;
    Vocabulary vocab;
    std::vector<Sample> samples;
    std::uint64_t seed = 0;
    int per_attr_count = 0;
    std::pair<double, double> ratio{0.5, 0.5};
    std::string run_config_digest;  // resolved pipeline config, when applicable

    std::string schema_hash() const { return schema.hash(); }
};

std::string serialize_corpus(const CorpusFile& c);
CorpusFile parse_corpus(const std::string& content);
void save_corpus(const CorpusFile& c, const std::filesystem::path& path);
CorpusFile load_corpus(const std::filesystem::path& path);

// Deterministic stratified split: within every (explicit attr x implicit
// cell) block, each k-th sample joins the held-out side. Used for evaluation
// probes and the scoring LM so they never see training text.
struct SplitIds {
    std::vector<int> train;
    std::vector<int> heldout;
};
SplitIds heldout_split(const std::vector<Sample>& samples, int every_kth = 10);

}  // namespace mcg::corpus

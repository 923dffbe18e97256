#pragma once

// The frozen attribute latent space: one latent row per corpus sample
// (plus synthetic counterfactual rows balancing minority cells), per-attribute
// row sets, iterative intersection retrieval, and the target-vector
// computation feeding generation.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mcg/netcore.hpp"
#include "mcg/trainer.hpp"

namespace mcg::space {

struct RowLabel {
    int source_id = -1;  // corpus sample id (anchor id for synthetic rows)
    int explicit_aspect = 0;
    int explicit_attr = 0;
    std::map<int, int> implicit_attrs;
    bool synthetic = false;

    bool operator==(const RowLabel&) const = default;
};

struct TargetAttr {
    int aspect = 0;
    int attr = 0;
    double weight = 1.0;
};

struct TargetSpec {
    std::vector<TargetAttr> attrs;  // at most one per aspect
    int k = 20;                     // retrieval size per attribute, clipped to set size

    void validate(const corpus::AttributeSchema& schema) const;
    // Parses "topic=sport,sentiment=positive"; weights default to 1.
    static TargetSpec parse(const std::string& text, const corpus::AttributeSchema& schema,
                            int k = 20);
    std::string describe(const corpus::AttributeSchema& schema) const;
};

class AttributeSpace {
public:
    AttributeSpace() = default;

    static AttributeSpace from_rows(int dim, std::vector<double> data,
                                    std::vector<RowLabel> labels, std::string schema_hash,
                                    std::string checkpoint_digest = "",
                                    std::string run_config_digest = "");

    int dim() const { return dim_; }
    int rows() const { return static_cast<int>(labels_.size()); }
    const double* row(int i) const { return data_.data() + static_cast<std::size_t>(i) * dim_; }
    const RowLabel& label(int i) const { return labels_.at(static_cast<std::size_t>(i)); }
    const std::vector<RowLabel>& labels() const { return labels_; }
    const std::vector<double>& raw() const { return data_; }

    // Retrieval set of an attribute: rows explicitly labeled with it,
    // synthetic rows included (they carry their anchor's explicit label).
    const std::vector<int>& attr_rows(int aspect, int attr) const;

    const std::string& schema_hash() const { return schema_hash_; }
    const std::string& checkpoint_digest() const { return checkpoint_digest_; }
    const std::string& run_config_digest() const { return run_config_digest_; }
    int synthetic_rows() const;

    std::uint64_t digest() const;

    bool operator==(const AttributeSpace& o) const {
        return dim_ == o.dim_ && data_ == o.data_ && labels_ == o.labels_ &&
               schema_hash_ == o.schema_hash_;
    }

private:
    void rebuild_index();

    int dim_ = 0;
    std::vector<double> data_;
    std::vector<RowLabel> labels_;
    std::map<std::pair<int, int>, std::vector<int>> by_attr_;
    std::string schema_hash_;
    std::string checkpoint_digest_;
    std::string run_config_digest_;
};

// Encodes every corpus sample into the latent space. With counterfactuals
// enabled, each (explicit attr, implicit attr) minority cell is topped up to
// parity with its sibling by synthetic rows built from the disentangled
// factors of randomly paired anchors and opposite-implicit partners (pairing
// seeded by the corpus seed, so rebuilds are identical).
AttributeSpace build_space(const net::Model& model, const corpus::CorpusFile& corpus_file,
                           bool include_counterfactuals, const std::string& checkpoint_digest,
                           const std::string& run_config_digest = "");

// "Balanced" inference variant: downsamples real rows so that, per explicit
// attribute, the implicit cells have equal cardinality. Seeded and
// deterministic; synthetic rows are dropped first.
AttributeSpace balance_cells(const AttributeSpace& space, std::uint64_t seed);

// The K rows of `attr`'s set minimizing summed Euclidean distance to the
// other target attributes' representatives (set mean), iterated to a fixed
// point (at most 10 rounds); ties break toward the lower row index. K clips
// to the set size.
std::vector<int> intersection_topk(const AttributeSpace& space, const TargetSpec& target,
                                   const TargetAttr& attr);

// Weighted sum over target attributes of the mean of their top-K rows.
nn::Tensor target_vector(const AttributeSpace& space, const TargetSpec& target);

void save_space(const AttributeSpace& space, const std::filesystem::path& path);
AttributeSpace load_space(const std::filesystem::path& path);

}  // namespace mcg::space

#pragma once

// Training orchestration: batching, opposite-attribute resampling,
// counterfactual partner sampling, EMA centroid tracking for the intervention
// distance loss, the per-step update, and the full loop with checkpointing.

#include <filesystem>
#include <optional>
#include <set>

#include "mcg/losses.hpp"
#include "mcg/netcore.hpp"

namespace mcg::trainer {

struct TrainConfig {
    int epochs = 20;
    int batch_size = 32;
    double lr = 1e-4;  // reference full-scale default; presets override
    std::map<std::string, double> loss_weights = losses::default_loss_weights();
    double gamma = losses::kDefaultGamma;
    double lambda = 0.1;  // prefix-noise scale during training; 0 at inference
    std::uint64_t seed = 0;
    bool counterfactual = true;  // counterfactual latents and their loss terms
    bool resample = true;        // opposite-implicit companion resampling
    std::set<std::string> drop_losses;  // subset of {cls, gap, mul, r_intv, d_intv}
    int imbalanced_aspect = 0;
    double centroid_momentum = 0.9;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
    void validate(const corpus::AttributeSchema& schema) const;
};

// ----------------------------------------------------------------------------
// EMA centroids per (explicit aspect, explicit attr, implicit aspect,
// implicit attr) cell. Cells never observed report no centroid.

class CentroidTracker {
public:
    using CellKey = std::array<int, 4>;

    CentroidTracker() = default;
    CentroidTracker(int dim, double momentum) : dim_(dim), momentum_(momentum) {}

    // One update per cell appearing in the batch: the cell centroid moves to
    // m * centroid + (1 - m) * batch-cell-mean; the first observation adopts
    // the batch mean. Counts grow by the number of batch members seen.
    void update(const std::vector<std::pair<CellKey, nn::Tensor>>& batch_latents);

    std::optional<nn::Tensor> centroid(const CellKey& key) const;
    long count(const CellKey& key) const;
    int dim() const { return dim_; }

private:
    struct Cell {
        nn::Tensor value;
        long count = 0;
    };
    int dim_ = 0;
    double momentum_ = 0.9;
    std::map<CellKey, Cell> cells_;
};

// ----------------------------------------------------------------------------
// Training-set view: samples of one split plus their index sets.

struct TrainData {
    corpus::AttributeSchema schema;
    corpus::Vocabulary vocab;
    std::vector<corpus::Sample> samples;
    corpus::IndexSets index;
    std::map<int, const corpus::Sample*> by_id;
    int implicit_aspect = -1;

    static TrainData from_samples(const corpus::AttributeSchema& schema,
                                  const corpus::Vocabulary& vocab,
                                  std::vector<corpus::Sample> samples);
    const corpus::Sample& sample(int id) const;
};

// Uniform draw from the same explicit attribute with the opposite implicit
// attribute. An empty opposite cell signals a degenerate corpus.
const corpus::Sample& resample_opposite(const TrainData& data, const corpus::Sample& anchor,
                                        Rng& rng);

// Uniform draw among samples sharing the anchor's implicit attribute with a
// different explicit attribute (same explicit aspect).
const corpus::Sample& sample_partner_same_implicit(const TrainData& data,
                                                   const corpus::Sample& anchor, Rng& rng);

// Uniform draw among samples with the opposite implicit attribute; the
// explicit attribute is unconstrained.
const corpus::Sample& sample_partner_opposite_implicit(const TrainData& data,
                                                       const corpus::Sample& anchor, Rng& rng);

// Counterfactual latent: elementwise sum carrying the anchor's explicit label
// and the partner's implicit label.
struct CfVector {
    nn::Tensor z;
    int explicit_aspect = 0;
    int explicit_attr = 0;
    int implicit_aspect = 0;
    int implicit_attr = 0;
};
CfVector build_counterfactual_vector(const nn::Tensor& h_explicit_anchor,
                                     const nn::Tensor& h_implicit_partner,
                                     const corpus::Sample& anchor,
                                     const corpus::Sample& partner, int implicit_aspect);

// ----------------------------------------------------------------------------
// Steps and the loop.

struct StepResult {
    losses::LossBreakdown breakdown;
    int base_samples = 0;
    int effective_samples = 0;          // base + resampled companions
    std::map<int, int> companions;      // anchor id -> companion id
    int skipped_distance_terms = 0;     // anchors whose cell centroid was unavailable
};

// One optimization step over the given base batch. Encodes, disentangles,
// builds one shared counterfactual latent per imbalanced-aspect anchor,
// assembles the active losses, and updates all trainable parameters. The
// decoder is bound frozen and never changes. Throws on a non-finite total,
// with the breakdown in the message.
StepResult train_step(net::Model& model, const net::Decoder& decoder, const TrainData& data,
                      const std::vector<int>& batch_ids, CentroidTracker& tracker,
                      const TrainConfig& cfg, nn::AdamW& opt, Rng& sample_rng, Rng& noise_rng);

struct TrainResult {
    std::filesystem::path best_dir;
    std::filesystem::path final_dir;
    std::filesystem::path log_path;
    double best_epoch_loss = 0.0;
    int best_epoch = -1;
    long steps = 0;
    int skipped_distance_terms = 0;
};

// Full run over the training split of the corpus: per-step JSONL log, best
// (by mean epoch total) and final checkpoints, decoder digest invariance
// enforced. Reproducible from cfg.seed.
TrainResult train(net::Model& model, const net::Decoder& decoder,
                  const corpus::CorpusFile& corpus_file, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir, const std::string& corpus_digest,
                  const std::string& run_config_digest);

}  // namespace mcg::trainer

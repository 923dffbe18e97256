#pragma once

// Pipeline: layered run configuration (flag > config file > preset > default),
// the corpus -> pretrain -> train -> space -> generate -> eval stage graph
// with digest-based idempotence, and the grid-search / batch / ablation
// commands built on top of it.

#include <filesystem>

#include "mcg/evalsuite.hpp"
#include "mcg/trainer.hpp"

namespace mcg::pipeline {

struct RunConfig {
    std::string preset = "desk";
    std::uint64_t seed = 7;

    // corpus
    int per_attr_count = 500;
    std::pair<double, double> ratio = {0.7, 0.3};
    std::string annotate = "gold";  // gold | probe

    // model dimensions
    net::ModelConfig model;

    // decoder pretraining and the held-out scoring LM
    net::PretrainConfig pretrain{};
    net::PretrainConfig scorer{};

    // downstream training
    trainer::TrainConfig train{};

    // attribute space
    bool space_counterfactual = true;

    // generation protocol
    int k = 20;
    int max_len = 50;
    double gen_lambda = 0.0;
    int repetitions = 2;
    std::map<std::string, double> gen_weights;  // aspect name -> weight
    std::vector<std::string> prompts;           // space-joined token strings

    // evaluation
    std::string relevance_mode = "marker";  // marker | classifier
    int gridsearch_generations = 20;
    std::string gridsearch_objective = "mean_relevance";  // | min_relevance

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    std::string digest() const { return to_hex(fnv1a(to_json().dump())); }

    corpus::AttributeSchema schema() const;  // built-in desk schema
};

// Presets; unknown names raise an error listing the valid ones.
RunConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

// Resolution: preset, then config-file overlay, then CLI overlay (both are
// RFC 7386 merge patches over the full config document).
RunConfig resolve_config(const std::string& preset, const nlohmann::json& file_overlay,
                         const nlohmann::json& cli_overlay);

// ----------------------------------------------------------------------------
// Stage graph.

enum class StageStatus { Ran, Skipped };

struct StageOutcome {
    std::string name;
    StageStatus status = StageStatus::Ran;
};

struct PipelineResult {
    std::vector<StageOutcome> stages;
    bool ok = true;
};

extern const std::vector<std::string> kAllStages;  // corpus..eval in order

class Pipeline {
public:
    Pipeline(RunConfig cfg, std::filesystem::path root);

    const RunConfig& config() const { return cfg_; }
    const std::filesystem::path& root() const { return root_; }

    std::filesystem::path corpus_path() const { return root_ / "corpus" / "corpus.jsonl"; }
    std::filesystem::path decoder_dir() const { return root_ / "decoder"; }
    std::filesystem::path scorer_dir() const { return root_ / "scorer"; }
    std::filesystem::path model_dir() const { return root_ / "model"; }
    std::filesystem::path checkpoint_dir() const { return model_dir() / "ckpt_best"; }
    std::filesystem::path space_path() const { return root_ / "space" / "space.bin"; }
    std::filesystem::path results_path() const { return root_ / "gen" / "results.jsonl"; }
    std::filesystem::path report_dir() const { return root_ / "eval"; }

    // Runs the requested stages in graph order. A stage is skipped when its
    // manifest matches the current config slice and inputs and its outputs are
    // intact, unless an upstream stage ran in this invocation or force is set.
    // Missing upstream artifacts raise an error naming the stage to run first.
    PipelineResult run(const std::vector<std::string>& stages, bool force = false);

    // The default generation protocol for this configuration: the Cartesian
    // product of all aspects' attributes with the configured weights.
    gen::BatchProtocol default_protocol(const corpus::AttributeSchema& schema) const;

    // Grid search per combination; writes gridsearch/weights.json and returns
    // the weight table keyed by combination description.
    std::map<std::string, std::map<std::string, double>> run_gridsearch(
        const std::map<std::string, std::vector<double>>& ranges_by_aspect);

    // Batch generation with an explicit protocol (writes to gen/results.jsonl
    // unless an output path is given).
    std::vector<gen::GenerationResult> run_batch(
        const gen::BatchProtocol& protocol,
        const std::optional<std::filesystem::path>& out = std::nullopt);

private:
    friend struct StageRunner;
    RunConfig cfg_;
    std::filesystem::path root_;
};

// ----------------------------------------------------------------------------
// Ablation.

struct AblationVariantSpec {
    std::string name;
    bool counterfactual = true;
    bool resample = true;
    std::set<std::string> drop_losses;
    std::string space_mode = "augmented";  // augmented | plain | balanced
    bool reuse_intact_model = false;       // inference-side variants

    nlohmann::json to_json() const;
    static AblationVariantSpec from_json(const nlohmann::json& j);
};

// The full default protocol: intact, training-strategy removals, per-loss
// drops, and the inference-side variants.
std::vector<AblationVariantSpec> default_ablation_protocol();

// Trains (or reuses) each variant, builds its space, evaluates the shared
// protocol with shared seeds, and writes a comparative report under
// <root>/ablate. Requires the corpus and pretrain stages.
std::vector<eval::AblationRow> run_ablation(Pipeline& pipe,
                                            const std::vector<AblationVariantSpec>& variants);

}  // namespace mcg::pipeline

#pragma once

// Evaluation: attribute relevance (exact marker oracle or trained classifier),
// distinctness, perplexity under a held-out scoring LM, temperature-scaled
// calibration, the combination report, disentanglement diagnostics, and the
// ablation harness.

#include "mcg/generation.hpp"
#include "mcg/textclf.hpp"

namespace mcg::eval {

using Texts = std::vector<std::vector<std::string>>;

// Argmax attribute of `aspect` by marker count; -1 on a tie or no markers.
int marker_argmax(const corpus::AttributeSchema& schema,
                  const std::vector<std::string>& text, int aspect);

enum class RelevanceMode { Marker, Classifier };

// Fraction of texts whose predicted attribute equals the target, in percent.
// Classifier mode requires a trained classifier for the aspect.
double relevance(const Texts& texts, int aspect, int target_attr,
                 const corpus::AttributeSchema& schema, RelevanceMode mode,
                 const corpus::BowClassifier* classifier = nullptr);

struct DistinctnessResult {
    double value = 0.0;
    int skipped_levels = 0;  // (text, n) pairs skipped because the text is shorter than n
};

// Mean over n in {1,2,3} of distinct-n, each averaged per text.
DistinctnessResult distinctness_detail(const Texts& texts);
double distinctness(const Texts& texts);

// exp of the mean per-token negative log-likelihood under the scoring LM.
double perplexity(const Texts& texts, const net::Decoder& scorer);

// softmax(logits / T); T must be positive.
std::vector<double> temperature_scaled_distribution(const std::vector<double>& logits,
                                                    double temperature);
// Calibration temperatures used to neutralize near-neutral texts in the
// reference co-occurrence statistics (world, sport, business, technology).
std::vector<double> default_neutral_calibration_temperatures();

// ----------------------------------------------------------------------------
// Combination report.

struct ComboRow {
    std::string target;
    std::map<std::string, double> relevance_by_aspect;  // aspect name -> percent
    double mean_relevance = 0.0;
    int texts = 0;
};

struct EvalReport {
    std::vector<ComboRow> rows;
    // aspect name -> (mean, population std over combination rows)
    std::map<std::string, std::pair<double, double>> aspect_stats;
    double overall_average = 0.0;  // mean of the aspect means
    double ppl = 0.0;
    double distinct = 0.0;
    std::map<std::string, std::string> metadata;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
    std::string format_table() const;
};

struct EvalConfig {
    RelevanceMode mode = RelevanceMode::Marker;
    // Classifier mode: one trained classifier per aspect.
    std::map<int, const corpus::BowClassifier*> classifiers;
};

// Scores every result against its own target combination, fills the
// per-result relevance fields, and aggregates per aspect over combinations.
EvalReport build_report(std::vector<gen::GenerationResult>& results,
                        const corpus::AttributeSchema& schema, const EvalConfig& cfg,
                        const net::Decoder* scorer_lm);

void save_report(const EvalReport& report, const std::filesystem::path& dir);
EvalReport load_report(const std::filesystem::path& dir);

// ----------------------------------------------------------------------------
// Latent probes for evaluation (trained after the fact, never inside training).

struct LatentProbeConfig {
    int epochs = 200;
    double lr = 0.1;
    std::uint64_t seed = 0;
};

net::Probe train_latent_probe(const std::vector<nn::Tensor>& latents,
                              const std::vector<int>& labels, int aspect, int n_classes,
                              const LatentProbeConfig& cfg = {});

// ----------------------------------------------------------------------------
// Disentanglement diagnostics: factor-swap effects, mirroring the swap tables.

struct DiagnosticsConfig {
    int max_anchors_per_attr = 25;  // held-out anchors per explicit attribute
    int gen_max_len = 30;
    std::uint64_t seed = 0;
};

struct DiagnosticsResult {
    // Explicit (marker-oracle) relevance of texts generated from each anchor's
    // own latent, per explicit attribute.
    std::map<int, double> baseline_explicit_relevance;
    // (target attr, factor-source attr) -> explicit relevance after replacing
    // the implicit factor with one drawn from the source attribute's samples.
    std::map<std::pair<int, int>, double> swap_explicit_relevance;
    // Explicit relevance after swapping in an opposite-implicit partner factor.
    double opposite_swap_explicit_relevance = 0.0;
    double baseline_average = 0.0;
    // Share of held-out anchors whose implicit-probe argmax flips to the
    // opposite attribute after the swap.
    double implicit_flip_rate = 0.0;
    int anchors = 0;

    std::string format_table(const corpus::AttributeSchema& schema) const;
    nlohmann::json to_json() const;
};

DiagnosticsResult disentanglement_diagnostics(const net::Model& model,
                                              const net::Decoder& decoder,
                                              const corpus::CorpusFile& corpus_file,
                                              const DiagnosticsConfig& cfg = {});

// ----------------------------------------------------------------------------
// Ablation harness: one report row per prepared variant, same protocol.

struct AblationVariant {
    std::string name;
    std::filesystem::path model_dir;
    std::filesystem::path space_path;
};

struct AblationRow {
    std::string name;
    EvalReport report;
};

// Loads each variant's checkpoint and store and evaluates the shared protocol.
// A missing artifact raises an error naming the variant.
std::vector<AblationRow> ablation_run(const std::vector<AblationVariant>& variants,
                                      const net::Decoder& decoder,
                                      const gen::BatchProtocol& protocol,
                                      const corpus::AttributeSchema& schema,
                                      const EvalConfig& eval_cfg, const net::Decoder* scorer_lm);

std::string format_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace mcg::eval

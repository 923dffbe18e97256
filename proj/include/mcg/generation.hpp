#pragma once

// Controlled generation from a frozen store and trained checkpoint: target
// vector retrieval, prefix construction, greedy decoding, the batch protocol,
// and exhaustive weight grid search.

#include <functional>
#include <optional>

#include "mcg/latentspace.hpp"

namespace mcg::gen {

struct GenerationResult {
    std::vector<std::string> prompt;
    std::vector<std::string> output;
    std::string target;                      // e.g. "topic=sport,sentiment=positive"
    std::map<std::string, double> weights;   // aspect name -> weight used
    int k = 0;
    int repetition = 0;
    std::string z_digest;                    // digest of the target vector
    std::map<std::string, double> relevance;  // per aspect, filled by evaluation

    nlohmann::json to_json() const;
    static GenerationResult from_json(const nlohmann::json& j);
};

struct GenerateConfig {
    int max_len = 50;      // output token budget
    double lambda = 0.0;   // prefix noise at inference; 0 keeps decoding pure
    std::uint64_t noise_seed = 0;
};

// Target vector -> prefix -> greedy continuation. Deterministic at lambda 0.
GenerationResult generate(const space::AttributeSpace& store, const net::Model& model,
                          const net::Decoder& decoder, const space::TargetSpec& target,
                          const std::vector<std::string>& prompt,
                          const GenerateConfig& cfg = {});

// ----------------------------------------------------------------------------
// Batch protocol: one result per (combination, prompt, repetition), streamed
// to a results file as line-delimited JSON when a path is given.

struct BatchProtocol {
    std::vector<space::TargetSpec> combinations;
    std::vector<std::vector<std::string>> prompts;
    int repetitions = 1;
    GenerateConfig gen;

    nlohmann::json to_json(const corpus::AttributeSchema& schema) const;
    static BatchProtocol from_json(const nlohmann::json& j,
                                   const corpus::AttributeSchema& schema);
};

std::vector<GenerationResult> batch_generate(
    const space::AttributeSpace& store, const net::Model& model, const net::Decoder& decoder,
    const BatchProtocol& protocol,
    const std::optional<std::filesystem::path>& results_path = std::nullopt);

void save_results(const std::vector<GenerationResult>& results,
                  const std::filesystem::path& path);
std::vector<GenerationResult> load_results(const std::filesystem::path& path);

// ----------------------------------------------------------------------------
// Weight grid search: exhaustive enumeration of the Cartesian product.

struct GridCandidate {
    std::vector<double> weights;  // aligned with the target's attributes
    double score = 0.0;           // objective, higher is better
    double ppl = 0.0;             // tie-break, lower is better
};

struct GridSearchOutcome {
    GridCandidate best;
    std::vector<GridCandidate> evaluated;  // enumeration order (lexicographic)
};

// scorer(weights) -> (objective score, perplexity). The argmax of the score
// wins; ties fall to lower perplexity, then to the lexicographically smaller
// weight vector. Empty ranges are rejected.
GridSearchOutcome grid_search_weights(
    const std::vector<std::vector<double>>& ranges,
    const std::function<std::pair<double, double>(const std::vector<double>&)>& scorer);

// Reference full-scale search ranges, keyed by aspect name: sentiment
// {1.5, 2.5, 3.5}; topic 2.0 to 10.5 in steps of 1.5; detoxification fixed 1.
std::map<std::string, std::vector<double>> paper_weight_ranges();

}  // namespace mcg::gen

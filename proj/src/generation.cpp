#include "mcg/generation.hpp"

#include <fstream>
#include <sstream>

namespace mcg::gen {

using nn::Tensor;

namespace {

void check(bool ok, const std::string& msg) {
    if (!ok) {
        throw std::invalid_argument(msg);
    }
}

std::string join(const std::vector<std::string>& toks) {
    std::string out;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (i) out += ' ';
        out += toks[i];
    }
    return out;
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
}

}  // namespace

nlohmann::json GenerationResult::to_json() const {
    return {{"prompt", join(prompt)},   {"output", join(output)}, {"target", target},
            {"weights", weights},       {"k", k},                 {"repetition", repetition},
            {"z_digest", z_digest},     {"relevance", relevance}};
}

GenerationResult GenerationResult::from_json(const nlohmann::json& j) {
    GenerationResult r;
    r.prompt = split(j.at("prompt").get<std::string>());
    r.output = split(j.at("output").get<std::string>());
    r.target = j.at("target").get<std::string>();
    r.weights = j.at("weights").get<std::map<std::string, double>>();
    r.k = j.at("k").get<int>();
    r.repetition = j.at("repetition").get<int>();
    r.z_digest = j.at("z_digest").get<std::string>();
    r.relevance = j.at("relevance").get<std::map<std::string, double>>();
    return r;
}

GenerationResult generate(const space::AttributeSpace& store, const net::Model& model,
                          const net::Decoder& decoder, const space::TargetSpec& target,
                          const std::vector<std::string>& prompt, const GenerateConfig& cfg) {
    target.validate(model.schema());
    check(store.schema_hash() == model.schema().hash(),
          "generate: store/checkpoint schema mismatch");
    check(decoder.vocab().tokens == model.vocab().tokens,
          "generate: decoder/checkpoint vocabulary mismatch");
    check(cfg.max_len >= 0, "generate: negative output budget");

    const Tensor z = space::target_vector(store, target);
    const Tensor prefix = model.compute_prefix(z, cfg.lambda, cfg.noise_seed);
    const net::TokenIds prompt_ids = model.vocab().encode(prompt);
    const net::TokenIds out_ids = decoder.greedy(prefix, prompt_ids, cfg.max_len);

    GenerationResult r;
    r.prompt = prompt;
    r.output = model.vocab().decode(out_ids);
    r.target = target.describe(model.schema());
    for (const auto& a : target.attrs) {
        r.weights[model.schema().aspect(a.aspect).name] = a.weight;
    }
    r.k = target.k;
    r.z_digest = to_hex(fnv1a(z.data));
    return r;
}

// ----------------------------------------------------------------------------
// Batch protocol.

nlohmann::json BatchProtocol::to_json(const corpus::AttributeSchema& schema) const {
    nlohmann::json combos = nlohmann::json::array();
    for (const auto& c : combinations) {
        nlohmann::json attrs = nlohmann::json::array();
        for (const auto& a : c.attrs) {
            attrs.push_back({{"aspect", schema.aspect(a.aspect).name},
                             {"attr",
                              schema.aspect(a.aspect)
                                  .attributes[static_cast<std::size_t>(a.attr)]
                                  .name},
                             {"weight", a.weight}});
        }
        combos.push_back({{"attrs", attrs}, {"k", c.k}});
    }
    nlohmann::json jp = nlohmann::json::array();
    for (const auto& p : prompts) {
        jp.push_back(join(p));
    }
    return {{"combinations", combos},
            {"prompts", jp},
            {"repetitions", repetitions},
            {"max_len", gen.max_len},
            {"lambda", gen.lambda}};
}

BatchProtocol BatchProtocol::from_json(const nlohmann::json& j,
                                       const corpus::AttributeSchema& schema) {
    BatchProtocol p;
    for (const auto& jc : j.at("combinations")) {
        space::TargetSpec t;
        t.k = jc.at("k").get<int>();
        for (const auto& ja : jc.at("attrs")) {
            const int aspect = schema.aspect_index(ja.at("aspect").get<std::string>());
            check(aspect >= 0, "protocol: unknown aspect");
            const int attr = schema.attr_index(aspect, ja.at("attr").get<std::string>());
            check(attr >= 0, "protocol: unknown attribute");
            t.attrs.push_back({aspect, attr, ja.at("weight").get<double>()});
        }
        t.validate(schema);
        p.combinations.push_back(std::move(t));
    }
    for (const auto& jp : j.at("prompts")) {
        p.prompts.push_back(split(jp.get<std::string>()));
    }
    p.repetitions = j.at("repetitions").get<int>();
    p.gen.max_len = j.at("max_len").get<int>();
    p.gen.lambda = j.at("lambda").get<double>();
    return p;
}

std::vector<GenerationResult> batch_generate(
    const space::AttributeSpace& store, const net::Model& model, const net::Decoder& decoder,
    const BatchProtocol& protocol, const std::optional<std::filesystem::path>& results_path) {
    check(protocol.repetitions >= 1, "batch_generate: repetitions must be >= 1");
    std::ofstream out;
    if (results_path.has_value()) {
        if (results_path->has_parent_path()) {
            std::filesystem::create_directories(results_path->parent_path());
        }
        out.open(*results_path, std::ios::trunc);
        check(out.good(), "batch_generate: cannot open results file");
    }
    std::vector<GenerationResult> results;
    for (const auto& combo : protocol.combinations) {
        for (const auto& prompt : protocol.prompts) {
            for (int rep = 0; rep < protocol.repetitions; ++rep) {
                GenerateConfig cfg = protocol.gen;
                if (cfg.lambda > 0.0) {
                    // Independent perturbations per repetition.
                    cfg.noise_seed = fnv1a(&rep, sizeof(rep),
                                           fnv1a(join(prompt), protocol.gen.noise_seed));
                }
                GenerationResult r = generate(store, model, decoder, combo, prompt, cfg);
                r.repetition = rep;
                if (out.is_open()) {
                    out << r.to_json().dump() << "\n";
                }
                results.push_back(std::move(r));
            }
        }
    }
    return results;
}

void save_results(const std::vector<GenerationResult>& results,
                  const std::filesystem::path& path) {
    std::string out;
    for (const auto& r : results) {
        out += r.to_json().dump();
        out += '\n';
    }
    write_text_file(path, out);
}

std::vector<GenerationResult> load_results(const std::filesystem::path& path) {
    std::istringstream in(read_text_file(path));
    std::vector<GenerationResult> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            out.push_back(GenerationResult::from_json(nlohmann::json::parse(line)));
        }
    }
    return out;
}

// ----------------------------------------------------------------------------
// Grid search.

GridSearchOutcome grid_search_weights(
    const std::vector<std::vector<double>>& ranges,
    const std::function<std::pair<double, double>(const std::vector<double>&)>& scorer) {
    check(!ranges.empty(), "grid_search_weights: no weight dimensions");
    for (const auto& r : ranges) {
        check(!r.empty(), "grid_search_weights: empty candidate range");
    }

    GridSearchOutcome outcome;
    std::vector<std::size_t> idx(ranges.size(), 0);
    bool done = false;
    while (!done) {
        GridCandidate cand;
        for (std::size_t d = 0; d < ranges.size(); ++d) {
            cand.weights.push_back(ranges[d][idx[d]]);
        }
        const auto [score, ppl] = scorer(cand.weights);
        cand.score = score;
        cand.ppl = ppl;
        outcome.evaluated.push_back(cand);

        // Argmax of the score; ties fall to lower perplexity, then to the
        // lexicographically smaller weight vector.
        const bool better =
            outcome.evaluated.size() == 1 || cand.score > outcome.best.score ||
            (cand.score == outcome.best.score &&
             (cand.ppl < outcome.best.ppl ||
              (cand.ppl == outcome.best.ppl && cand.weights < outcome.best.weights)));
        if (better) {
            outcome.best = cand;
        }

        // Advance the least significant dimension (last index fastest), which
        // makes the overall enumeration lexicographic in the weight vector.
        for (std::size_t d = ranges.size(); d-- > 0;) {
            if (++idx[d] < ranges[d].size()) {
                break;
            }
            idx[d] = 0;
            if (d == 0) {
                done = true;
            }
        }
    }
    return outcome;
}

std::map<std::string, std::vector<double>> paper_weight_ranges() {
    std::vector<double> topic;
    for (double w = 2.0; w <= 10.5; w += 1.5) {
        topic.push_back(w);
    }
    return {{"sentiment", {1.5, 2.5, 3.5}},
            {"topic", topic},
            {"detoxification", {1.0}}};
}

}  // namespace mcg::gen

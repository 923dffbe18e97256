// mcg: multi-aspect controllable generation pipeline.
//
// Subcommands cover the full flow (corpus, pretrain, train, space, generate,
// gridsearch, batch, eval, ablate) plus `all`, which runs the core stages in
// order with digest-based skipping. The artifact root comes from --root, the
// MCG_ROOT environment variable, or ./artifacts, in that order.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "mcg/pipeline.hpp"

using namespace mcg;

namespace {

std::filesystem::path resolve_root(const std::string& flag) {
    if (!flag.empty()) {
        return flag;
    }
    if (const char* env = std::getenv("MCG_ROOT")) {
        return env;
    }
    return "artifacts";
}

pipeline::RunConfig resolve(const std::string& preset, const std::string& config_file,
                            const std::vector<std::string>& sets, std::uint64_t seed,
                            bool seed_given) {
    nlohmann::json file_overlay;
    if (!config_file.empty()) {
        file_overlay = nlohmann::json::parse(read_text_file(config_file));
    }
    nlohmann::json cli_overlay = nlohmann::json::object();
    if (seed_given) {
        cli_overlay["seed"] = seed;
    }
    // --set a.b.c=value overrides one field via a merge patch.
    for (const std::string& kv : sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
        }
        const std::string key = kv.substr(0, eq);
        const std::string value = kv.substr(eq + 1);
        nlohmann::json leaf;
        try {
            leaf = nlohmann::json::parse(value);
        } catch (...) {
            leaf = value;  // plain string
        }
        nlohmann::json* node = &cli_overlay;
        std::size_t start = 0;
        while (true) {
            const auto dot = key.find('.', start);
            const std::string part = key.substr(start, dot - start);
            if (dot == std::string::npos) {
                (*node)[part] = leaf;
                break;
            }
            node = &(*node)[part];
            start = dot + 1;
        }
    }
    return pipeline::resolve_config(preset, file_overlay, cli_overlay);
}

void print_outcomes(const pipeline::PipelineResult& result) {
    for (const auto& stage : result.stages) {
        std::cout << "[" << stage.name << "] "
                  << (stage.status == pipeline::StageStatus::Ran ? "ran" : "skipped (fresh)")
                  << "\n";
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-aspect controllable text generation pipeline"};
    app.require_subcommand(1);

    std::string root_flag, preset = "desk", config_file;
    std::vector<std::string> sets;
    std::uint64_t seed = 7;
    bool force = false;
    app.add_option("--root", root_flag, "artifact root directory (or MCG_ROOT)");
    app.add_option("--preset", preset, "configuration preset (desk, paper)");
    app.add_option("--config", config_file, "JSON config overlay file");
    app.add_option("--set", sets, "dotted-key config override, e.g. train.lr=0.002");
    auto* seed_opt = app.add_option("--seed", seed, "master seed");
    app.add_flag("--force", force, "rerun stages even when fresh");

    // ---- corpus ----
    auto* corpus_cmd = app.add_subcommand("corpus", "build or inspect the synthetic corpus");
    corpus_cmd->require_subcommand(1);
    auto* corpus_build = corpus_cmd->add_subcommand("build", "generate and annotate a corpus");
    std::string schema_file, corpus_out = "corpus.jsonl", ratio_text = "0.7:0.3";
    std::string annotate_mode = "gold";
    int count = 500;
    std::uint64_t corpus_seed = 7;
    corpus_build->add_option("--schema", schema_file, "schema JSON file (default: built-in)");
    corpus_build->add_option("--count", count, "samples per attribute");
    corpus_build->add_option("--ratio", ratio_text, "implicit cell proportions, e.g. 0.7:0.3");
    corpus_build->add_option("--seed", corpus_seed, "corpus seed");
    corpus_build->add_option("--annotate", annotate_mode, "implicit labels: gold or probe");
    corpus_build->add_option("--out", corpus_out, "output corpus file");

    auto* corpus_report = corpus_cmd->add_subcommand("report", "cell counts and proportions");
    std::string report_file;
    corpus_report->add_option("file", report_file, "corpus file")->required();

    // ---- pipeline stage commands ----
    for (const auto& name : {"pretrain", "train", "space", "generate", "eval"}) {
        app.add_subcommand(name, std::string("run the ") + name + " stage");
    }
    auto* all_cmd = app.add_subcommand("all", "run corpus through eval in order");

    // ---- gridsearch ----
    auto* grid_cmd = app.add_subcommand("gridsearch", "search per-combination weights");
    std::string ranges_file;
    grid_cmd->add_option("--ranges", ranges_file,
                         "JSON file mapping aspect name to candidate weights");

    // ---- batch ----
    auto* batch_cmd = app.add_subcommand("batch", "generate with an explicit protocol");
    std::string protocol_file, batch_out;
    batch_cmd->add_option("--protocol", protocol_file, "protocol JSON file")->required();
    batch_cmd->add_option("--out", batch_out, "results file (default: gen/results.jsonl)");

    // ---- ablate ----
    auto* ablate_cmd = app.add_subcommand("ablate", "train and compare strategy variants");
    std::string ablate_protocol_file;
    ablate_cmd->add_option("--protocol", ablate_protocol_file,
                           "JSON list of variant specs (default: built-in set)");

    // ---- space query ----
    auto* query_cmd = app.add_subcommand("query", "retrieve top-K rows for a target");
    std::string query_target;
    int query_k = 20;
    query_cmd->add_option("--target", query_target, "e.g. topic=sport,sentiment=positive")
        ->required();
    query_cmd->add_option("--k", query_k, "retrieval size");

    CLI11_PARSE(app, argc, argv);

    try {
        if (corpus_build->parsed()) {
            const auto colon = ratio_text.find(':');
            if (colon == std::string::npos) {
                throw std::invalid_argument("--ratio expects p:q");
            }
            const std::pair<double, double> ratio = {std::stod(ratio_text.substr(0, colon)),
                                                     std::stod(ratio_text.substr(colon + 1))};
            const corpus::AttributeSchema schema =
                schema_file.empty() ? corpus::desk_schema()
                                    : corpus::AttributeSchema::load(schema_file);
            auto samples = corpus::build_synthetic_corpus(schema, count, ratio, corpus_seed);
            const int s = schema.implicit_aspect();
            std::vector<corpus::Sample> a_part, b_part;
            for (auto& smp : samples) {
                (smp.explicit_aspect == s ? b_part : a_part).push_back(smp);
            }
            const corpus::Vocabulary vocab = corpus::Vocabulary::from_schema(schema);
            corpus::BowClassifier probe;
            const corpus::BowClassifier* probe_ptr = nullptr;
            corpus::AnnotateMode mode = corpus::AnnotateMode::Gold;
            if (annotate_mode == "probe") {
                corpus::BowTrainConfig bcfg;
                bcfg.seed = corpus_seed;
                probe = corpus::train_annotation_probe(b_part, s, vocab, bcfg);
                probe_ptr = &probe;
                mode = corpus::AnnotateMode::Probe;
            } else if (annotate_mode != "gold") {
                throw std::invalid_argument("--annotate must be gold or probe");
            }
            auto annotated = corpus::annotate_implicit(corpus::strip_implicit(a_part, s), s,
                                                       mode, schema, probe_ptr);
            annotated.insert(annotated.end(), b_part.begin(), b_part.end());
            std::sort(annotated.begin(), annotated.end(),
                      [](const corpus::Sample& x, const corpus::Sample& y) {
                          return x.id < y.id;
                      });
            corpus::CorpusFile file;
            file.schema = schema;
            file.vocab = vocab;
            file.samples = std::move(annotated);
            file.seed = corpus_seed;
            file.per_attr_count = count;
            file.ratio = ratio;
            corpus::save_corpus(file, corpus_out);
            std::cout << "wrote " << file.samples.size() << " samples to " << corpus_out
                      << "\n";
            return 0;
        }
        if (corpus_report->parsed()) {
            const corpus::CorpusFile file = corpus::load_corpus(report_file);
            const auto rows = corpus::imbalance_report(corpus::index_corpus(file.samples));
            std::cout << corpus::format_imbalance_report(rows, file.schema);
            return 0;
        }

        const pipeline::RunConfig cfg =
            resolve(preset, config_file, sets, seed, seed_opt->count() > 0);
        pipeline::Pipeline pipe(cfg, resolve_root(root_flag));

        if (all_cmd->parsed()) {
            print_outcomes(pipe.run(pipeline::kAllStages, force));
            return 0;
        }
        for (const auto& name : pipeline::kAllStages) {
            if (name != "corpus" && app.got_subcommand(name)) {
                print_outcomes(pipe.run({name}, force));
                return 0;
            }
        }
        if (grid_cmd->parsed()) {
            std::map<std::string, std::vector<double>> ranges;
            if (ranges_file.empty()) {
                for (const auto& [aspect, w] : cfg.gen_weights) {
                    ranges[aspect] = {w};
                }
            } else {
                const auto j = nlohmann::json::parse(read_text_file(ranges_file));
                ranges = j.get<std::map<std::string, std::vector<double>>>();
            }
            const auto table = pipe.run_gridsearch(ranges);
            for (const auto& [combo, weights] : table) {
                std::cout << combo << " ->";
                for (const auto& [aspect, w] : weights) {
                    std::cout << " " << aspect << "=" << w;
                }
                std::cout << "\n";
            }
            return 0;
        }
        if (batch_cmd->parsed()) {
            const auto j = nlohmann::json::parse(read_text_file(protocol_file));
            const auto protocol = gen::BatchProtocol::from_json(j, cfg.schema());
            const auto results = pipe.run_batch(
                protocol, batch_out.empty()
                              ? std::nullopt
                              : std::optional<std::filesystem::path>(batch_out));
            std::cout << "generated " << results.size() << " results\n";
            return 0;
        }
        if (ablate_cmd->parsed()) {
            std::vector<pipeline::AblationVariantSpec> variants;
            if (ablate_protocol_file.empty()) {
                variants = pipeline::default_ablation_protocol();
            } else {
                const auto j = nlohmann::json::parse(read_text_file(ablate_protocol_file));
                for (const auto& jv : j.at("variants")) {
                    variants.push_back(pipeline::AblationVariantSpec::from_json(jv));
                }
            }
            const auto rows = pipeline::run_ablation(pipe, variants);
            std::cout << eval::format_ablation_table(rows);
            return 0;
        }
        if (query_cmd->parsed()) {
            const auto store = space::load_space(pipe.space_path());
            const auto schema = cfg.schema();
            const auto target = space::TargetSpec::parse(query_target, schema, query_k);
            for (const auto& attr : target.attrs) {
                const auto rows = space::intersection_topk(store, target, attr);
                std::cout << schema.aspect(attr.aspect).name << "="
                          << schema.aspect(attr.aspect)
                                 .attributes[static_cast<std::size_t>(attr.attr)]
                                 .name
                          << " top-" << rows.size() << ":";
                for (int row : rows) {
                    std::cout << " " << store.label(row).source_id
                              << (store.label(row).synthetic ? "*" : "");
                }
                std::cout << "\n";
            }
            const auto z = space::target_vector(store, target);
            std::cout << "target vector digest " << to_hex(fnv1a(z.data)) << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

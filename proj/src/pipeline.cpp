#include "mcg/pipeline.hpp"

#include <algorithm>
#include <iostream>
#include <sstream>

namespace mcg::pipeline {

using corpus::Sample;

namespace {

void check(bool ok, const std::string& msg) {
    if (!ok) {
        throw std::invalid_argument(msg);
    }
}

std::vector<std::string> split_tokens(const std::string& line) {
    std::istringstream ss(line);
    std::vector<std::string> out;
    std::string tok;
    while (ss >> tok) {
        out.push_back(tok);
    }
    return out;
}

// Digest of an artifact: a file, or a checkpoint directory (manifest + tensors).
std::string artifact_digest(const std::filesystem::path& path) {
    if (std::filesystem::is_directory(path)) {
        std::uint64_t h = kFnvOffset;
        const std::string m = read_text_file(path / "manifest.json");
        h = fnv1a(m.data(), m.size(), h);
        const std::string t = read_text_file(path / "tensors.bin");
        h = fnv1a(t.data(), t.size(), h);
        return to_hex(h);
    }
    return to_hex(file_digest(path));
}

bool artifact_exists(const std::filesystem::path& path) {
    if (std::filesystem::is_directory(path)) {
        return std::filesystem::exists(path / "manifest.json") &&
               std::filesystem::exists(path / "tensors.bin");
    }
    return std::filesystem::exists(path);
}

}  // namespace

// ----------------------------------------------------------------------------
// RunConfig.

nlohmann::json RunConfig::to_json() const {
    nlohmann::json train_json = train.to_json();
    train_json.erase("seed");  // the top-level seed is the only seed
    return {
        {"preset", preset},
        {"seed", seed},
        {"corpus",
         {{"per_attr_count", per_attr_count},
          {"ratio", {ratio.first, ratio.second}},
          {"annotate", annotate}}},
        {"model", model.to_json()},
        {"pretrain",
         {{"epochs", pretrain.epochs}, {"batch_size", pretrain.batch_size}, {"lr", pretrain.lr}}},
        {"scorer",
         {{"epochs", scorer.epochs}, {"batch_size", scorer.batch_size}, {"lr", scorer.lr}}},
        {"train", train_json},
        {"space", {{"counterfactual", space_counterfactual}}},
        {"generate",
         {{"k", k},
          {"max_len", max_len},
          {"lambda", gen_lambda},
          {"repetitions", repetitions},
          {"weights", gen_weights},
          {"prompts", prompts}}},
        {"eval",
         {{"relevance_mode", relevance_mode},
          {"gridsearch_generations", gridsearch_generations},
          {"gridsearch_objective", gridsearch_objective}}},
    };
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig c;
    c.preset = j.at("preset").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    const auto& jc = j.at("corpus");
    c.per_attr_count = jc.at("per_attr_count").get<int>();
    c.ratio = {jc.at("ratio").at(0).get<double>(), jc.at("ratio").at(1).get<double>()};
    c.annotate = jc.at("annotate").get<std::string>();
    check(c.annotate == "gold" || c.annotate == "probe",
          "config: annotate must be 'gold' or 'probe'");
    c.model = net::ModelConfig::from_json(j.at("model"));
    c.pretrain.epochs = j.at("pretrain").at("epochs").get<int>();
    c.pretrain.batch_size = j.at("pretrain").at("batch_size").get<int>();
    c.pretrain.lr = j.at("pretrain").at("lr").get<double>();
    c.scorer.epochs = j.at("scorer").at("epochs").get<int>();
    c.scorer.batch_size = j.at("scorer").at("batch_size").get<int>();
    c.scorer.lr = j.at("scorer").at("lr").get<double>();
    nlohmann::json train_json = j.at("train");
    train_json["seed"] = c.seed;
    c.train = trainer::TrainConfig::from_json(train_json);
    c.space_counterfactual = j.at("space").at("counterfactual").get<bool>();
    const auto& jg = j.at("generate");
    c.k = jg.at("k").get<int>();
    c.max_len = jg.at("max_len").get<int>();
    c.gen_lambda = jg.at("lambda").get<double>();
    c.repetitions = jg.at("repetitions").get<int>();
    c.gen_weights = jg.at("weights").get<std::map<std::string, double>>();
    c.prompts = jg.at("prompts").get<std::vector<std::string>>();
    const auto& je = j.at("eval");
    c.relevance_mode = je.at("relevance_mode").get<std::string>();
    check(c.relevance_mode == "marker" || c.relevance_mode == "classifier",
          "config: relevance_mode must be 'marker' or 'classifier'");
    c.gridsearch_generations = je.at("gridsearch_generations").get<int>();
    c.gridsearch_objective = je.at("gridsearch_objective").get<std::string>();
    // Everything derives from the one seed.
    c.pretrain.seed = c.seed;
    c.scorer.seed = c.seed + 1;
    return c;
}

corpus::AttributeSchema RunConfig::schema() const {
    return corpus::desk_schema();
}

std::vector<std::string> preset_names() {
    return {"desk", "paper"};
}

RunConfig preset_config(const std::string& name) {
    RunConfig c;
    if (name == "desk") {
        c.preset = "desk";
        c.per_attr_count = 500;
        c.model = net::desk_model_config();
        c.pretrain = {8, 32, 3e-3, 0};
        c.scorer = {24, 32, 3e-3, 0};
        c.train.epochs = 20;
        c.train.batch_size = 32;
        c.train.lr = 1e-3;
        c.gen_weights = {{"topic", 1.0}, {"sentiment", 1.0}};
        c.prompts = {"the", "a", "the news", "the report", "people"};
    } else if (name == "paper") {
        // Full-scale fidelity preset; documents the reference configuration
        // and is not expected to run in tests.
        c.preset = "paper";
        c.per_attr_count = 5000;
        c.model = net::paper_model_config();
        c.pretrain = {30, 64, 1e-4, 0};
        c.scorer = {30, 64, 1e-4, 0};
        c.train.epochs = 300;
        c.train.batch_size = 64;
        c.train.lr = 1e-4;
        c.gen_weights = {{"topic", 3.5}, {"sentiment", 2.5}};
        c.prompts = {"the", "a", "the news", "the report", "people"};
    } else {
        std::string valid;
        for (const auto& p : preset_names()) {
            valid += valid.empty() ? p : (", " + p);
        }
        throw std::invalid_argument("unknown preset '" + name + "' (valid presets: " + valid +
                                    ")");
    }
    c.train.seed = c.seed;
    c.pretrain.seed = c.seed;
    c.scorer.seed = c.seed + 1;
    return c;
}

RunConfig resolve_config(const std::string& preset, const nlohmann::json& file_overlay,
                         const nlohmann::json& cli_overlay) {
    nlohmann::json doc = preset_config(preset).to_json();
    if (!file_overlay.is_null()) {
        doc.merge_patch(file_overlay);
    }
    if (!cli_overlay.is_null()) {
        doc.merge_patch(cli_overlay);
    }
    return RunConfig::from_json(doc);
}

// ----------------------------------------------------------------------------
// Stage graph.

const std::vector<std::string> kAllStages = {"corpus", "pretrain", "train",
                                             "space",  "generate", "eval"};

Pipeline::Pipeline(RunConfig cfg, std::filesystem::path root)
    : cfg_(std::move(cfg)), root_(std::move(root)) {
    cfg_.train.validate(cfg_.schema());
}

namespace {

struct StageSpec {
    std::string name;
    nlohmann::json config_slice;
    // label -> (artifact path, stage that produces it)
    std::vector<std::tuple<std::string, std::filesystem::path, std::string>> inputs;
    std::vector<std::filesystem::path> outputs;
};

}  // namespace

struct StageRunner {
    Pipeline& p;
    bool force = false;
    bool upstream_ran = false;
    std::vector<StageOutcome> outcomes;

    std::filesystem::path manifest_path(const std::string& stage) const {
        return p.root() / "manifests" / (stage + ".json");
    }

    bool fresh(const StageSpec& spec, const std::map<std::string, std::string>& in_digests) {
        const auto mp = manifest_path(spec.name);
        if (!std::filesystem::exists(mp)) {
            return false;
        }
        nlohmann::json m;
        try {
            m = nlohmann::json::parse(read_text_file(mp));
        } catch (...) {
            return false;
        }
        if (m.value("config_slice_digest", "") !=
            to_hex(fnv1a(spec.config_slice.dump()))) {
            return false;
        }
        if (m.value("inputs", nlohmann::json::object()) != nlohmann::json(in_digests)) {
            return false;
        }
        for (const auto& out : spec.outputs) {
            if (!artifact_exists(out)) {
                return false;
            }
            const std::string rel =
                std::filesystem::relative(out, p.root()).generic_string();
            if (m.at("outputs").value(rel, "") != artifact_digest(out)) {
                return false;
            }
        }
        return true;
    }

    void finish(const StageSpec& spec, const std::map<std::string, std::string>& in_digests) {
        nlohmann::json m;
        m["stage"] = spec.name;
        m["run_config_digest"] = p.config().digest();
        m["config_slice_digest"] = to_hex(fnv1a(spec.config_slice.dump()));
        m["inputs"] = in_digests;
        nlohmann::json outs = nlohmann::json::object();
        for (const auto& out : spec.outputs) {
            outs[std::filesystem::relative(out, p.root()).generic_string()] =
                artifact_digest(out);
        }
        m["outputs"] = std::move(outs);
        write_text_file(manifest_path(spec.name), m.dump(2) + "\n");
    }

    template <typename Fn>
    void stage(const StageSpec& spec, Fn&& fn) {
        std::map<std::string, std::string> in_digests;
        for (const auto& [label, path, producer] : spec.inputs) {
            if (!artifact_exists(path)) {
                throw std::runtime_error("stage '" + spec.name + "': missing input '" + label +
                                         "'; run stage '" + producer + "' first");
            }
            in_digests[label] = artifact_digest(path);
        }
        if (!force && !upstream_ran && fresh(spec, in_digests)) {
            outcomes.push_back({spec.name, StageStatus::Skipped});
            return;
        }
        fn();
        finish(spec, in_digests);
        upstream_ran = true;
        outcomes.push_back({spec.name, StageStatus::Ran});
    }
};

gen::BatchProtocol Pipeline::default_protocol(const corpus::AttributeSchema& schema) const {
    gen::BatchProtocol protocol;
    // Cartesian product of attributes across aspects, in schema order.
    std::vector<space::TargetSpec> combos = {{std::vector<space::TargetAttr>{}, cfg_.k}};
    for (int t = 0; t < schema.n_aspects(); ++t) {
        double w = 1.0;
        auto it = cfg_.gen_weights.find(schema.aspect(t).name);
        if (it != cfg_.gen_weights.end()) {
            w = it->second;
        }
        std::vector<space::TargetSpec> next;
        for (const auto& base : combos) {
            for (int a = 0; a < schema.n_attrs(t); ++a) {
                space::TargetSpec ts = base;
                ts.attrs.push_back({t, a, w});
                next.push_back(std::move(ts));
            }
        }
        combos = std::move(next);
    }
    protocol.combinations = std::move(combos);
    for (const std::string& p : cfg_.prompts) {
        protocol.prompts.push_back(split_tokens(p));
    }
    protocol.repetitions = cfg_.repetitions;
    protocol.gen.max_len = cfg_.max_len;
    protocol.gen.lambda = cfg_.gen_lambda;
    protocol.gen.noise_seed = cfg_.seed;
    return protocol;
}

PipelineResult Pipeline::run(const std::vector<std::string>& stages, bool force) {
    for (const auto& s : stages) {
        check(std::find(kAllStages.begin(), kAllStages.end(), s) != kAllStages.end(),
              "unknown stage '" + s + "'");
    }
    auto requested = [&](const std::string& s) {
        return std::find(stages.begin(), stages.end(), s) != stages.end();
    };

    StageRunner runner{*this, force};
    const corpus::AttributeSchema schema = cfg_.schema();
    const std::string cfg_digest = cfg_.digest();

    if (requested("corpus")) {
        StageSpec spec;
        spec.name = "corpus";
        spec.config_slice = {{"seed", cfg_.seed},
                             {"per_attr_count", cfg_.per_attr_count},
                             {"ratio", {cfg_.ratio.first, cfg_.ratio.second}},
                             {"annotate", cfg_.annotate},
                             {"schema", schema.to_json()}};
        spec.outputs = {corpus_path()};
        runner.stage(spec, [&] {
            auto samples = corpus::build_synthetic_corpus(schema, cfg_.per_attr_count,
                                                          cfg_.ratio, cfg_.seed);
            const int s = schema.implicit_aspect();
            std::vector<Sample> a_part, b_part;
            for (auto& smp : samples) {
                (smp.explicit_aspect == s ? b_part : a_part).push_back(smp);
            }
            const corpus::Vocabulary vocab = corpus::Vocabulary::from_schema(schema);
            corpus::BowClassifier probe;
            const corpus::BowClassifier* probe_ptr = nullptr;
            corpus::AnnotateMode mode = corpus::AnnotateMode::Gold;
            if (cfg_.annotate == "probe") {
                corpus::BowTrainConfig bcfg;
                bcfg.seed = cfg_.seed;
                probe = corpus::train_annotation_probe(b_part, s, vocab, bcfg);
                probe_ptr = &probe;
                mode = corpus::AnnotateMode::Probe;
            }
            auto annotated =
                corpus::annotate_implicit(corpus::strip_implicit(a_part, s), s, mode, schema,
                                          probe_ptr);
            annotated.insert(annotated.end(), b_part.begin(), b_part.end());
            std::sort(annotated.begin(), annotated.end(),
                      [](const Sample& x, const Sample& y) { return x.id < y.id; });

            corpus::CorpusFile file;
            file.schema = schema;
            file.vocab = vocab;
            file.samples = std::move(annotated);
            file.seed = cfg_.seed;
            file.per_attr_count = cfg_.per_attr_count;
            file.ratio = cfg_.ratio;
            file.run_config_digest = cfg_digest;
            corpus::save_corpus(file, corpus_path());
        });
    }

    if (requested("pretrain")) {
        StageSpec spec;
        spec.name = "pretrain";
        spec.config_slice = {{"seed", cfg_.seed},
                             {"decoder", cfg_.model.to_json().at("decoder")},
                             {"pretrain",
                              {{"epochs", cfg_.pretrain.epochs},
                               {"batch_size", cfg_.pretrain.batch_size},
                               {"lr", cfg_.pretrain.lr}}},
                             {"scorer",
                              {{"epochs", cfg_.scorer.epochs},
                               {"batch_size", cfg_.scorer.batch_size},
                               {"lr", cfg_.scorer.lr}}}};
        spec.inputs = {{"corpus", corpus_path(), "corpus"}};
        spec.outputs = {decoder_dir(), scorer_dir()};
        runner.stage(spec, [&] {
            const corpus::CorpusFile file = corpus::load_corpus(corpus_path());
            const corpus::SplitIds split = corpus::heldout_split(file.samples);
            std::vector<net::TokenIds> train_texts, held_texts;
            std::map<int, const Sample*> by_id;
            for (const Sample& smp : file.samples) {
                by_id[smp.id] = &smp;
            }
            for (int id : split.train) {
                train_texts.push_back(file.vocab.encode(by_id.at(id)->text));
            }
            for (int id : split.heldout) {
                held_texts.push_back(file.vocab.encode(by_id.at(id)->text));
            }
            const std::string corpus_digest = to_hex(file_digest(corpus_path()));

            net::Decoder decoder(cfg_.model.decoder, file.vocab,
                                 Rng(cfg_.seed).derive("decoder-init"));
            const auto stats =
                net::pretrain_decoder(decoder, train_texts, held_texts, cfg_.pretrain);
            std::cout << "[pretrain] decoder heldout ppl " << stats.heldout_perplexity
                      << " (|V| = " << file.vocab.size() << ")\n";
            net::save_decoder(decoder_dir(), decoder, file.schema.hash(), corpus_digest,
                              cfg_digest);

            // Scoring LM: trained on the held-out split only.
            net::Decoder scorer(cfg_.model.decoder, file.vocab,
                                Rng(cfg_.seed).derive("scorer-init"));
            net::pretrain_decoder(scorer, held_texts, train_texts, cfg_.scorer);
            net::save_decoder(scorer_dir(), scorer, file.schema.hash(), corpus_digest,
                              cfg_digest);
        });
    }

    if (requested("train")) {
        StageSpec spec;
        spec.name = "train";
        nlohmann::json tj = cfg_.train.to_json();
        tj["seed"] = cfg_.seed;
        spec.config_slice = {{"model", cfg_.model.to_json()}, {"train", tj}};
        spec.inputs = {{"corpus", corpus_path(), "corpus"},
                       {"decoder", decoder_dir(), "pretrain"}};
        spec.outputs = {checkpoint_dir(), model_dir() / "ckpt_final"};
        runner.stage(spec, [&] {
            const corpus::CorpusFile file = corpus::load_corpus(corpus_path());
            const net::Decoder decoder = net::load_decoder(decoder_dir());
            net::Model model(cfg_.model, file.schema, file.vocab,
                             Rng(cfg_.seed).derive("model-init").seed());
            trainer::TrainConfig tc = cfg_.train;
            tc.seed = cfg_.seed;
            const auto result = trainer::train(model, decoder, file, tc, model_dir(),
                                               to_hex(file_digest(corpus_path())), cfg_digest);
            std::cout << "[train] best epoch " << result.best_epoch << " loss "
                      << result.best_epoch_loss << " over " << result.steps << " steps\n";
        });
    }

    if (requested("space")) {
        StageSpec spec;
        spec.name = "space";
        spec.config_slice = {{"counterfactual", cfg_.space_counterfactual}};
        spec.inputs = {{"corpus", corpus_path(), "corpus"},
                       {"checkpoint", checkpoint_dir(), "train"}};
        spec.outputs = {space_path()};
        runner.stage(spec, [&] {
            const corpus::CorpusFile file = corpus::load_corpus(corpus_path());
            net::Model model = net::load_model(checkpoint_dir());
            const auto store =
                space::build_space(model, file, cfg_.space_counterfactual,
                                   artifact_digest(checkpoint_dir()), cfg_digest);
            save_space(store, space_path());
        });
    }

    if (requested("generate")) {
        StageSpec spec;
        spec.name = "generate";
        spec.config_slice = {{"k", cfg_.k},
                             {"max_len", cfg_.max_len},
                             {"lambda", cfg_.gen_lambda},
                             {"repetitions", cfg_.repetitions},
                             {"weights", cfg_.gen_weights},
                             {"prompts", cfg_.prompts}};
        spec.inputs = {{"checkpoint", checkpoint_dir(), "train"},
                       {"space", space_path(), "space"},
                       {"decoder", decoder_dir(), "pretrain"}};
        spec.outputs = {results_path()};
        runner.stage(spec, [&] {
            net::Model model = net::load_model(checkpoint_dir());
            const net::Decoder decoder = net::load_decoder(decoder_dir());
            const auto store = space::load_space(space_path());
            const auto protocol = default_protocol(model.schema());
            gen::batch_generate(store, model, decoder, protocol, results_path());
        });
    }

    if (requested("eval")) {
        StageSpec spec;
        spec.name = "eval";
        spec.config_slice = {{"relevance_mode", cfg_.relevance_mode}};
        spec.inputs = {{"results", results_path(), "generate"},
                       {"corpus", corpus_path(), "corpus"},
                       {"scorer", scorer_dir(), "pretrain"},
                       {"checkpoint", checkpoint_dir(), "train"},
                       {"decoder", decoder_dir(), "pretrain"}};
        spec.outputs = {report_dir() / "report.json"};
        runner.stage(spec, [&] {
            const corpus::CorpusFile file = corpus::load_corpus(corpus_path());
            auto results = gen::load_results(results_path());
            const net::Decoder scorer = net::load_decoder(scorer_dir());

            eval::EvalConfig ecfg;
            std::map<int, corpus::BowClassifier> classifiers;
            if (cfg_.relevance_mode == "classifier") {
                ecfg.mode = eval::RelevanceMode::Classifier;
                const corpus::SplitIds split = corpus::heldout_split(file.samples);
                std::vector<Sample> held;
                for (const Sample& smp : file.samples) {
                    if (std::binary_search(split.heldout.begin(), split.heldout.end(),
                                           smp.id)) {
                        held.push_back(smp);
                    }
                }
                for (int t = 0; t < file.schema.n_aspects(); ++t) {
                    corpus::BowTrainConfig bcfg;
                    bcfg.seed = cfg_.seed + static_cast<std::uint64_t>(t);
                    classifiers.emplace(
                        t, corpus::train_eval_classifier(held, t, file.schema, file.vocab,
                                                         bcfg));
                    ecfg.classifiers[t] = &classifiers.at(t);
                }
            }
            const auto report = eval::build_report(results, file.schema, ecfg, &scorer);
            eval::save_report(report, report_dir());

            net::Model model = net::load_model(checkpoint_dir());
            const net::Decoder decoder = net::load_decoder(decoder_dir());
            eval::DiagnosticsConfig dcfg;
            dcfg.seed = cfg_.seed;
            const auto diag = eval::disentanglement_diagnostics(model, decoder, file, dcfg);
            write_text_file(report_dir() / "diagnostics.txt",
                            diag.format_table(file.schema));
            write_text_file(report_dir() / "diagnostics.json", diag.to_json().dump(2) + "\n");
            std::cout << "[eval] overall " << report.overall_average << " ppl " << report.ppl
                      << " distinct " << report.distinct << " flip "
                      << diag.implicit_flip_rate << "\n";
        });
    }

    PipelineResult result;
    result.stages = runner.outcomes;
    return result;
}

// ----------------------------------------------------------------------------
// Grid search.

std::map<std::string, std::map<std::string, double>> Pipeline::run_gridsearch(
    const std::map<std::string, std::vector<double>>& ranges_by_aspect) {
    const corpus::CorpusFile file = corpus::load_corpus(corpus_path());
    net::Model model = net::load_model(checkpoint_dir());
    const net::Decoder decoder = net::load_decoder(decoder_dir());
    const net::Decoder scorer = net::load_decoder(scorer_dir());
    const auto store = space::load_space(space_path());
    const auto protocol = default_protocol(file.schema);

    std::map<std::string, std::map<std::string, double>> table;
    for (const auto& combo : protocol.combinations) {
        std::vector<std::vector<double>> ranges;
        for (const auto& attr : combo.attrs) {
            const std::string aspect = file.schema.aspect(attr.aspect).name;
            auto it = ranges_by_aspect.find(aspect);
            check(it != ranges_by_aspect.end() && !it->second.empty(),
                  "gridsearch: empty range for aspect '" + aspect + "'");
            ranges.push_back(it->second);
        }

        auto scorer_fn = [&](const std::vector<double>& weights) {
            space::TargetSpec spec = combo;
            for (std::size_t i = 0; i < weights.size(); ++i) {
                spec.attrs[i].weight = weights[i];
            }
            std::vector<gen::GenerationResult> results;
            for (int g = 0; g < cfg_.gridsearch_generations; ++g) {
                const auto& prompt = protocol.prompts[static_cast<std::size_t>(g) %
                                                      protocol.prompts.size()];
                gen::GenerateConfig gc = protocol.gen;
                results.push_back(gen::generate(store, model, decoder, spec, prompt, gc));
            }
            eval::Texts texts;
            for (const auto& r : results) {
                texts.push_back(r.output);
            }
            double mean_rel = 0.0;
            double min_rel = 1e300;
            for (const auto& attr : spec.attrs) {
                const double rel = eval::relevance(texts, attr.aspect, attr.attr, file.schema,
                                                   eval::RelevanceMode::Marker);
                mean_rel += rel;
                min_rel = std::min(min_rel, rel);
            }
            mean_rel /= static_cast<double>(spec.attrs.size());
            const double ppl = eval::perplexity(texts, scorer);
            const double score =
                cfg_.gridsearch_objective == "min_relevance" ? min_rel : mean_rel;
            return std::make_pair(score, ppl);
        };

        const auto outcome = gen::grid_search_weights(ranges, scorer_fn);
        std::map<std::string, double> chosen;
        for (std::size_t i = 0; i < combo.attrs.size(); ++i) {
            chosen[file.schema.aspect(combo.attrs[i].aspect).name] = outcome.best.weights[i];
        }
        table[combo.describe(file.schema)] = std::move(chosen);
    }

    nlohmann::json j = table;
    write_text_file(root_ / "gridsearch" / "weights.json", j.dump(2) + "\n");
    return table;
}

std::vector<gen::GenerationResult> Pipeline::run_batch(
    const gen::BatchProtocol& protocol, const std::optional<std::filesystem::path>& out) {
    net::Model model = net::load_model(checkpoint_dir());
    const net::Decoder decoder = net::load_decoder(decoder_dir());
    const auto store = space::load_space(space_path());
    return gen::batch_generate(store, model, decoder, protocol,
                               out.has_value() ? out : std::optional(results_path()));
}

// ----------------------------------------------------------------------------
// Ablation.

nlohmann::json AblationVariantSpec::to_json() const {
    return {{"name", name},
            {"counterfactual", counterfactual},
            {"resample", resample},
            {"drop_losses", std::vector<std::string>(drop_losses.begin(), drop_losses.end())},
            {"space", space_mode},
            {"reuse_intact_model", reuse_intact_model}};
}

AblationVariantSpec AblationVariantSpec::from_json(const nlohmann::json& j) {
    AblationVariantSpec v;
    v.name = j.at("name").get<std::string>();
    v.counterfactual = j.value("counterfactual", true);
    v.resample = j.value("resample", true);
    for (const auto& d : j.value("drop_losses", nlohmann::json::array())) {
        v.drop_losses.insert(d.get<std::string>());
    }
    v.space_mode = j.value("space", "augmented");
    v.reuse_intact_model = j.value("reuse_intact_model", false);
    return v;
}

std::vector<AblationVariantSpec> default_ablation_protocol() {
    std::vector<AblationVariantSpec> out;
    AblationVariantSpec intact;
    intact.name = "intact";
    intact.reuse_intact_model = true;
    out.push_back(intact);

    AblationVariantSpec v;
    v.name = "no_counterfactual";
    v.counterfactual = false;
    v.space_mode = "plain";
    out.push_back(v);

    v = {};
    v.name = "no_resample";
    v.resample = false;
    out.push_back(v);

    for (const std::string& loss : {"cls", "gap", "mul", "r_intv", "d_intv"}) {
        v = {};
        v.name = "drop_" + loss;
        v.drop_losses = {loss};
        out.push_back(v);
    }

    v = {};
    v.name = "infer_no_aug";  // no augmentation strategy at inference
    v.reuse_intact_model = true;
    v.space_mode = "plain";
    out.push_back(v);

    v = {};
    v.name = "infer_balance";  // equal per-cell row counts before retrieval
    v.reuse_intact_model = true;
    v.space_mode = "balanced";
    out.push_back(v);
    return out;
}

std::vector<eval::AblationRow> run_ablation(Pipeline& pipe,
                                            const std::vector<AblationVariantSpec>& variants) {
    check(!variants.empty(), "ablation: no variants requested");
    // Shared upstream artifacts.
    pipe.run({"corpus", "pretrain", "train"});

    const corpus::CorpusFile file = corpus::load_corpus(pipe.corpus_path());
    const net::Decoder decoder = net::load_decoder(pipe.decoder_dir());
    const net::Decoder scorer = net::load_decoder(pipe.scorer_dir());
    const std::string corpus_digest = to_hex(file_digest(pipe.corpus_path()));
    const RunConfig& cfg = pipe.config();

    std::vector<eval::AblationVariant> prepared;
    for (const AblationVariantSpec& spec : variants) {
        const std::filesystem::path vdir = pipe.root() / "ablate" / spec.name;
        std::filesystem::path model_dir;
        if (spec.reuse_intact_model) {
            model_dir = pipe.checkpoint_dir();
        } else {
            model_dir = vdir / "model" / "ckpt_best";
            trainer::TrainConfig tc = cfg.train;
            tc.seed = cfg.seed;
            tc.counterfactual = spec.counterfactual;
            tc.resample = spec.resample;
            tc.drop_losses = spec.drop_losses;
            const std::string variant_digest =
                to_hex(fnv1a(tc.to_json().dump() + corpus_digest));
            bool reuse = false;
            if (std::filesystem::exists(model_dir / "manifest.json")) {
                try {
                    const auto info = net::read_checkpoint_info(model_dir);
                    reuse = info.extra.value("variant_digest", "") == variant_digest;
                } catch (...) {
                    reuse = false;
                }
            }
            if (!reuse) {
                net::Model model(cfg.model, file.schema, file.vocab,
                                 Rng(cfg.seed).derive("model-init").seed());
                trainer::train(model, decoder, file, tc, vdir / "model", corpus_digest,
                               cfg.digest());
                // Stamp the variant digest for reuse on identical reruns.
                net::Model best = net::load_model(model_dir);
                nlohmann::json extra = net::read_checkpoint_info(model_dir).extra;
                extra["variant_digest"] = variant_digest;
                net::save_model(model_dir, best, corpus_digest, cfg.digest(), extra);
            }
        }

        net::Model model = net::load_model(model_dir);
        space::AttributeSpace store;
        if (spec.space_mode == "augmented") {
            store = space::build_space(model, file, true, artifact_digest(model_dir),
                                       cfg.digest());
        } else if (spec.space_mode == "plain") {
            store = space::build_space(model, file, false, artifact_digest(model_dir),
                                       cfg.digest());
        } else if (spec.space_mode == "balanced") {
            store = space::balance_cells(
                space::build_space(model, file, false, artifact_digest(model_dir),
                                   cfg.digest()),
                cfg.seed);
        } else {
            throw std::invalid_argument("ablation: unknown space mode '" + spec.space_mode +
                                        "'");
        }
        const std::filesystem::path space_file = vdir / "space.bin";
        save_space(store, space_file);
        prepared.push_back({spec.name, model_dir, space_file});
    }

    eval::EvalConfig ecfg;
    const auto protocol = pipe.default_protocol(file.schema);
    auto rows = eval::ablation_run(prepared, decoder, protocol, file.schema, ecfg, &scorer);

    nlohmann::json jrows = nlohmann::json::array();
    for (const auto& row : rows) {
        jrows.push_back({{"name", row.name}, {"report", row.report.to_json()}});
    }
    write_text_file(pipe.root() / "ablate" / "report.json", jrows.dump(2) + "\n");
    write_text_file(pipe.root() / "ablate" / "report.txt", eval::format_ablation_table(rows));
    return rows;
}

}  // namespace mcg::pipeline

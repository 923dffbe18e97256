#include "mcg/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace mcg::eval {

using corpus::Sample;
using nn::Tensor;

namespace {

void check(bool ok, const std::string& msg) {
    if (!ok) {
        throw std::invalid_argument(msg);
    }
}

}  // namespace

int marker_argmax(const corpus::AttributeSchema& schema, const std::vector<std::string>& text,
                  int aspect) {
    const auto& asp = schema.aspect(aspect);
    std::vector<int> counts(asp.attributes.size(), 0);
    for (const std::string& tok : text) {
        for (std::size_t a = 0; a < asp.attributes.size(); ++a) {
            const auto& pool = asp.attributes[a].markers;
            if (std::find(pool.begin(), pool.end(), tok) != pool.end()) {
                ++counts[a];
            }
        }
    }
    int best = -1, best_count = 0;
    bool tie = false;
    for (std::size_t a = 0; a < counts.size(); ++a) {
        if (counts[a] > best_count) {
            best = static_cast<int>(a);
            best_count = counts[a];
            tie = false;
        } else if (counts[a] == best_count && counts[a] > 0) {
            tie = true;
        }
    }
    return tie ? -1 : best;
}

double relevance(const Texts& texts, int aspect, int target_attr,
                 const corpus::AttributeSchema& schema, RelevanceMode mode,
                 const corpus::BowClassifier* classifier) {
    check(!texts.empty(), "relevance: empty text batch");
    check(aspect >= 0 && aspect < schema.n_aspects(), "relevance: unknown aspect");
    if (mode == RelevanceMode::Classifier) {
        check(classifier != nullptr && classifier->trained(),
              "relevance: classifier mode requires a trained classifier");
        check(classifier->aspect() == aspect, "relevance: classifier aspect mismatch");
    }
    int hits = 0;
    for (const auto& text : texts) {
        const int predicted = mode == RelevanceMode::Marker
                                  ? marker_argmax(schema, text, aspect)
                                  : classifier->predict(text);
        hits += predicted == target_attr ? 1 : 0;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(texts.size());
}

DistinctnessResult distinctness_detail(const Texts& texts) {
    check(!texts.empty(), "distinctness: empty text batch");
    DistinctnessResult result;
    double level_sum = 0.0;
    int levels = 0;
    for (int n = 1; n <= 3; ++n) {
        double per_text_sum = 0.0;
        int counted = 0;
        for (const auto& text : texts) {
            if (static_cast<int>(text.size()) < n) {
                ++result.skipped_levels;
                continue;
            }
            std::set<std::string> unique;
            int total = 0;
            for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= text.size(); ++i) {
                std::string g;
                for (int j = 0; j < n; ++j) {
                    if (j) g += ' ';
                    g += text[i + static_cast<std::size_t>(j)];
                }
                unique.insert(std::move(g));
                ++total;
            }
            per_text_sum += static_cast<double>(unique.size()) / total;
            ++counted;
        }
        if (counted > 0) {
            level_sum += per_text_sum / counted;
            ++levels;
        }
    }
    check(levels > 0, "distinctness: all texts shorter than every n-gram level");
    result.value = level_sum / levels;
    return result;
}

double distinctness(const Texts& texts) {
    return distinctness_detail(texts).value;
}

double perplexity(const Texts& texts, const net::Decoder& scorer) {
    check(!texts.empty(), "perplexity: empty text batch");
    double nll = 0.0;
    long tokens = 0;
    for (const auto& text : texts) {
        const net::TokenIds ids = scorer.vocab().encode(text);  // OOV raises here
        nll -= scorer.logprob(Tensor{}, ids);
        tokens += static_cast<long>(ids.size()) + 1;
    }
    return std::exp(nll / static_cast<double>(tokens));
}

std::vector<double> temperature_scaled_distribution(const std::vector<double>& logits,
                                                    double temperature) {
    check(temperature > 0.0, "temperature_scaled_distribution: temperature must be positive");
    check(!logits.empty(), "temperature_scaled_distribution: empty logits");
    std::vector<double> scaled(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        scaled[i] = logits[i] / temperature;
    }
    std::vector<double> out(logits.size());
    nn::softmax_row(scaled.data(), out.data(), static_cast<int>(logits.size()));
    return out;
}

std::vector<double> default_neutral_calibration_temperatures() {
    return {6.5, 4.5, 5.0, 4.5};
}

// ----------------------------------------------------------------------------
// Report.

nlohmann::json EvalReport::to_json() const {
    nlohmann::json jrows = nlohmann::json::array();
    for (const ComboRow& r : rows) {
        jrows.push_back({{"target", r.target},
                         {"relevance", r.relevance_by_aspect},
                         {"mean_relevance", r.mean_relevance},
                         {"texts", r.texts}});
    }
    nlohmann::json stats = nlohmann::json::object();
    for (const auto& [aspect, ms] : aspect_stats) {
        stats[aspect] = {{"mean", ms.first}, {"std", ms.second}};
    }
    return {{"rows", jrows},       {"aspect_stats", stats},
            {"overall_average", overall_average},
            {"ppl", ppl},          {"distinct", distinct},
            {"metadata", metadata}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    for (const auto& jr : j.at("rows")) {
        ComboRow row;
        row.target = jr.at("target").get<std::string>();
        row.relevance_by_aspect = jr.at("relevance").get<std::map<std::string, double>>();
        row.mean_relevance = jr.at("mean_relevance").get<double>();
        row.texts = jr.at("texts").get<int>();
        r.rows.push_back(std::move(row));
    }
    for (const auto& [aspect, ms] : j.at("aspect_stats").items()) {
        r.aspect_stats[aspect] = {ms.at("mean").get<double>(), ms.at("std").get<double>()};
    }
    r.overall_average = j.at("overall_average").get<double>();
    r.ppl = j.at("ppl").get<double>();
    r.distinct = j.at("distinct").get<double>();
    r.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
    return r;
}

std::string EvalReport::format_table() const {
    std::ostringstream out;
    out << "combination";
    std::vector<std::string> aspects;
    for (const auto& [a, _] : aspect_stats) {
        aspects.push_back(a);
    }
    for (const auto& a : aspects) {
        out << "  " << a;
    }
    out << "\n";
    char buf[64];
    for (const ComboRow& r : rows) {
        out << r.target;
        for (const auto& a : aspects) {
            auto it = r.relevance_by_aspect.find(a);
            if (it == r.relevance_by_aspect.end()) {
                out << "  -";
            } else {
                std::snprintf(buf, sizeof(buf), "  %.1f", it->second);
                out << buf;
            }
        }
        out << "\n";
    }
    out << "aggregate";
    for (const auto& a : aspects) {
        const auto& [mean, sd] = aspect_stats.at(a);
        std::snprintf(buf, sizeof(buf), "  %.1f+-%.1f", mean, sd);
        out << buf;
    }
    out << "\n";
    std::snprintf(buf, sizeof(buf), "%.1f", overall_average);
    out << "overall " << buf;
    std::snprintf(buf, sizeof(buf), "%.2f", ppl);
    out << "  ppl " << buf;
    std::snprintf(buf, sizeof(buf), "%.4f", distinct);
    out << "  distinct " << buf << "\n";
    return out.str();
}

EvalReport build_report(std::vector<gen::GenerationResult>& results,
                        const corpus::AttributeSchema& schema, const EvalConfig& cfg,
                        const net::Decoder* scorer_lm) {
    check(!results.empty(), "build_report: no results");

    // Group results by target combination, preserving first-seen order.
    std::vector<std::string> order;
    std::map<std::string, std::vector<gen::GenerationResult*>> groups;
    for (auto& r : results) {
        if (groups.find(r.target) == groups.end()) {
            order.push_back(r.target);
        }
        groups[r.target].push_back(&r);
    }

    EvalReport report;
    std::map<std::string, std::vector<double>> per_aspect_values;
    for (const std::string& target : order) {
        auto& group = groups[target];
        const space::TargetSpec spec = space::TargetSpec::parse(target, schema);
        ComboRow row;
        row.target = target;
        row.texts = static_cast<int>(group.size());
        Texts texts;
        for (auto* r : group) {
            texts.push_back(r->output);
        }
        double mean_rel = 0.0;
        for (const auto& attr : spec.attrs) {
            const corpus::BowClassifier* clf = nullptr;
            if (cfg.mode == RelevanceMode::Classifier) {
                auto it = cfg.classifiers.find(attr.aspect);
                check(it != cfg.classifiers.end(),
                      "build_report: missing classifier for an aspect");
                clf = it->second;
            }
            const double rel = relevance(texts, attr.aspect, attr.attr, schema, cfg.mode, clf);
            const std::string aspect_name = schema.aspect(attr.aspect).name;
            row.relevance_by_aspect[aspect_name] = rel;
            per_aspect_values[aspect_name].push_back(rel);
            mean_rel += rel;
            // Per-result relevance: hit or miss for this text alone.
            for (auto* r : group) {
                const double one = relevance({r->output}, attr.aspect, attr.attr, schema,
                                             cfg.mode, clf);
                r->relevance[aspect_name] = one;
            }
        }
        row.mean_relevance = mean_rel / static_cast<double>(spec.attrs.size());
        report.rows.push_back(std::move(row));
    }

    double overall = 0.0;
    for (const auto& [aspect, values] : per_aspect_values) {
        double mean = 0.0;
        for (double v : values) {
            mean += v;
        }
        mean /= static_cast<double>(values.size());
        double var = 0.0;
        for (double v : values) {
            var += (v - mean) * (v - mean);
        }
        var /= static_cast<double>(values.size());  // population std over combinations
        report.aspect_stats[aspect] = {mean, std::sqrt(var)};
        overall += mean;
    }
    report.overall_average = overall / static_cast<double>(per_aspect_values.size());

    Texts all_texts;
    for (const auto& r : results) {
        all_texts.push_back(r.output);
    }
    const DistinctnessResult d = distinctness_detail(all_texts);
    report.distinct = d.value;
    if (scorer_lm != nullptr) {
        report.ppl = perplexity(all_texts, *scorer_lm);
    }

    report.metadata["relevance_mode"] =
        cfg.mode == RelevanceMode::Marker ? "marker" : "classifier";
    report.metadata["distinct_pooling"] = "per-text, averaged over texts";
    report.metadata["aspect_std"] = "population std over combination rows";
    report.metadata["skipped_distinct_levels"] = std::to_string(d.skipped_levels);
    return report;
}

void save_report(const EvalReport& report, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_text_file(dir / "report.txt", report.format_table());
    std::string sidecar;
    for (const ComboRow& r : report.rows) {
        sidecar += nlohmann::json({{"target", r.target},
                                   {"relevance", r.relevance_by_aspect},
                                   {"mean_relevance", r.mean_relevance},
                                   {"texts", r.texts}})
                       .dump();
        sidecar += '\n';
    }
    write_text_file(dir / "report_rows.jsonl", sidecar);
    write_text_file(dir / "report.json", report.to_json().dump(2) + "\n");
}

EvalReport load_report(const std::filesystem::path& dir) {
    return EvalReport::from_json(nlohmann::json::parse(read_text_file(dir / "report.json")));
}

// ----------------------------------------------------------------------------
// Latent probes.

net::Probe train_latent_probe(const std::vector<Tensor>& latents,
                              const std::vector<int>& labels, int aspect, int n_classes,
                              const LatentProbeConfig& cfg) {
    check(!latents.empty() && latents.size() == labels.size(),
          "train_latent_probe: empty or misaligned training data");
    const int d = static_cast<int>(latents[0].size());
    Rng rng = seeded_rng(cfg.seed, "latent-probe");
    net::Probe probe(aspect, d, n_classes, rng);
    auto named = probe.named_params("eval_probe");
    nn::Param* w = named[0].second;
    nn::Param* b = named[1].second;

    std::vector<std::size_t> order(latents.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::vector<double> logits(static_cast<std::size_t>(n_classes));
    std::vector<double> probs(static_cast<std::size_t>(n_classes));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t oi : order) {
            const Tensor& x = latents[oi];
            const int y = labels[oi];
            for (int c = 0; c < n_classes; ++c) {
                double z = b->value[static_cast<std::size_t>(c)];
                for (int j = 0; j < d; ++j) {
                    z += x[static_cast<std::size_t>(j)] *
                         w->value[static_cast<std::size_t>(j) * n_classes + c];
                }
                logits[static_cast<std::size_t>(c)] = z;
            }
            nn::softmax_row(logits.data(), probs.data(), n_classes);
            for (int c = 0; c < n_classes; ++c) {
                const double err = probs[static_cast<std::size_t>(c)] - (c == y ? 1.0 : 0.0);
                for (int j = 0; j < d; ++j) {
                    w->value[static_cast<std::size_t>(j) * n_classes + c] -=
                        cfg.lr * err * x[static_cast<std::size_t>(j)];
                }
                b->value[static_cast<std::size_t>(c)] -= cfg.lr * err;
            }
        }
    }
    return probe;
}

// ----------------------------------------------------------------------------
// Diagnostics.

std::string DiagnosticsResult::format_table(const corpus::AttributeSchema& schema) const {
    std::ostringstream out;
    char buf[64];
    out << "baseline explicit relevance per attribute:\n";
    for (const auto& [attr, rel] : baseline_explicit_relevance) {
        std::snprintf(buf, sizeof(buf), "  %-14s %.1f\n",
                      schema.aspect(0).attributes[static_cast<std::size_t>(attr)].name.c_str(),
                      rel);
        out << buf;
    }
    out << "explicit relevance after implicit-factor swap (row: target, col: source):\n";
    for (const auto& [key, rel] : swap_explicit_relevance) {
        std::snprintf(buf, sizeof(buf), "  %d<-%d %.1f\n", key.first, key.second, rel);
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "opposite-implicit swap: explicit relevance %.1f",
                  opposite_swap_explicit_relevance);
    out << buf;
    std::snprintf(buf, sizeof(buf), " (baseline %.1f), implicit flip rate %.1f%%\n",
                  baseline_average, implicit_flip_rate);
    out << buf;
    return out.str();
}

nlohmann::json DiagnosticsResult::to_json() const {
    nlohmann::json swaps = nlohmann::json::array();
    for (const auto& [key, rel] : swap_explicit_relevance) {
        swaps.push_back({{"target_attr", key.first}, {"source_attr", key.second}, {"relevance", rel}});
    }
    nlohmann::json baseline = nlohmann::json::object();
    for (const auto& [attr, rel] : baseline_explicit_relevance) {
        baseline[std::to_string(attr)] = rel;
    }
    return {{"baseline_explicit_relevance", baseline},
            {"swap_explicit_relevance", swaps},
            {"opposite_swap_explicit_relevance", opposite_swap_explicit_relevance},
            {"baseline_average", baseline_average},
            {"implicit_flip_rate", implicit_flip_rate},
            {"anchors", anchors}};
}

DiagnosticsResult disentanglement_diagnostics(const net::Model& model,
                                              const net::Decoder& decoder,
                                              const corpus::CorpusFile& corpus_file,
                                              const DiagnosticsConfig& cfg) {
    const int s = corpus_file.schema.implicit_aspect();
    check(s >= 0, "diagnostics: schema has no implicit-annotated aspect");
    const corpus::SplitIds split = corpus::heldout_split(corpus_file.samples);
    std::map<int, const Sample*> by_id;
    for (const Sample& smp : corpus_file.samples) {
        by_id[smp.id] = &smp;
    }

    // Factor cache and latent-probe training data from the training split.
    std::vector<Tensor> train_latents;
    std::vector<int> train_labels;
    std::map<int, std::vector<int>> train_by_attr;      // explicit attr -> ids (annotated)
    std::map<int, std::vector<int>> train_by_implicit;  // implicit attr -> ids
    std::map<int, net::Model::FactorsValue> factors;
    auto factors_of = [&](int id) -> const net::Model::FactorsValue& {
        auto it = factors.find(id);
        if (it != factors.end()) {
            return it->second;
        }
        const Sample* smp = by_id.at(id);
        return factors.emplace(id, model.disentangle(model.encode(smp->text))).first->second;
    };

    for (int id : split.train) {
        const Sample* smp = by_id.at(id);
        auto it = smp->implicit_attrs.find(s);
        if (smp->explicit_aspect != 0 || it == smp->implicit_attrs.end()) {
            continue;
        }
        train_by_attr[smp->explicit_attr].push_back(id);
        train_by_implicit[it->second].push_back(id);
        train_latents.push_back(factors_of(id).z);
        train_labels.push_back(it->second);
    }
    check(!train_latents.empty(), "diagnostics: no annotated training samples");

    LatentProbeConfig pcfg;
    pcfg.seed = cfg.seed;
    const net::Probe implicit_probe = train_latent_probe(
        train_latents, train_labels, s, corpus_file.schema.n_attrs(s), pcfg);

    // Held-out anchors, capped per explicit attribute.
    std::map<int, std::vector<int>> anchors_by_attr;
    for (int id : split.heldout) {
        const Sample* smp = by_id.at(id);
        if (smp->explicit_aspect != 0 || !smp->implicit_attrs.count(s)) {
            continue;
        }
        auto& v = anchors_by_attr[smp->explicit_attr];
        if (static_cast<int>(v.size()) < cfg.max_anchors_per_attr) {
            v.push_back(id);
        }
    }

    Rng rng = seeded_rng(cfg.seed, "diagnostics");
    DiagnosticsResult result;
    const int t = 0;
    const int n_attrs = corpus_file.schema.n_attrs(t);

    auto explicit_hit = [&](const Tensor& z, int target_attr) {
        const Tensor prefix = model.compute_prefix(z, 0.0, 0);
        const net::TokenIds out = decoder.greedy(prefix, {}, cfg.gen_max_len);
        return marker_argmax(corpus_file.schema, model.vocab().decode(out), t) == target_attr;
    };

    int flip_hits = 0;
    int opposite_hits = 0;
    int baseline_hits_total = 0;
    for (const auto& [attr, ids] : anchors_by_attr) {
        int baseline_hits = 0;
        std::map<int, int> swap_hits;
        for (int id : ids) {
            const Sample* anchor = by_id.at(id);
            const auto& fa = factors_of(id);
            if (explicit_hit(fa.z, attr)) {
                ++baseline_hits;
                ++baseline_hits_total;
            }

            // Swap the implicit factor with one from each other explicit attr.
            for (int src = 0; src < n_attrs; ++src) {
                if (src == attr) {
                    continue;
                }
                const auto& pool = train_by_attr[src];
                check(!pool.empty(), "diagnostics: empty factor-source pool");
                const int pid = pool[rng.uniform_index(pool.size())];
                Tensor z = fa.h_explicit;
                const auto& fp = factors_of(pid);
                for (std::size_t i = 0; i < z.size(); ++i) {
                    z[i] += fp.h_implicit[i];
                }
                if (explicit_hit(z, attr)) {
                    ++swap_hits[src];
                }
            }

            // Opposite-implicit swap: probe flip and explicit retention.
            const int own_implicit = anchor->implicit_attrs.at(s);
            const auto& opposite_pool = train_by_implicit[1 - own_implicit];
            check(!opposite_pool.empty(), "diagnostics: empty opposite-implicit pool");
            const int pid = opposite_pool[rng.uniform_index(opposite_pool.size())];
            Tensor zbar = fa.h_explicit;
            const auto& fp = factors_of(pid);
            for (std::size_t i = 0; i < zbar.size(); ++i) {
                zbar[i] += fp.h_implicit[i];
            }
            if (implicit_probe.argmax(zbar) == 1 - own_implicit) {
                ++flip_hits;
            }
            if (explicit_hit(zbar, attr)) {
                ++opposite_hits;
            }
            ++result.anchors;
        }
        const double denom = static_cast<double>(ids.size());
        result.baseline_explicit_relevance[attr] = 100.0 * baseline_hits / denom;
        result.swap_explicit_relevance[{attr, attr}] = 100.0 * baseline_hits / denom;
        for (const auto& [src, hits] : swap_hits) {
            result.swap_explicit_relevance[{attr, src}] = 100.0 * hits / denom;
        }
    }
    check(result.anchors > 0, "diagnostics: no held-out anchors");
    result.baseline_average = 100.0 * baseline_hits_total / result.anchors;
    result.implicit_flip_rate = 100.0 * flip_hits / result.anchors;
    result.opposite_swap_explicit_relevance = 100.0 * opposite_hits / result.anchors;
    return result;
}

// ----------------------------------------------------------------------------
// Ablation harness.

std::vector<AblationRow> ablation_run(const std::vector<AblationVariant>& variants,
                                      const net::Decoder& decoder,
                                      const gen::BatchProtocol& protocol,
                                      const corpus::AttributeSchema& schema,
                                      const EvalConfig& eval_cfg,
                                      const net::Decoder* scorer_lm) {
    check(!variants.empty(), "ablation_run: no variants");
    std::vector<AblationRow> rows;
    for (const AblationVariant& v : variants) {
        if (!std::filesystem::exists(v.model_dir / "manifest.json") ||
            !std::filesystem::exists(v.space_path)) {
            throw std::runtime_error("ablation_run: missing artifacts for variant '" + v.name +
                                     "'");
        }
        net::Model model = net::load_model(v.model_dir);
        const space::AttributeSpace store = space::load_space(v.space_path);
        auto results = gen::batch_generate(store, model, decoder, protocol);
        AblationRow row;
        row.name = v.name;
        row.report = build_report(results, schema, eval_cfg, scorer_lm);
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream out;
    out << "variant                     overall";
    std::vector<std::string> aspects;
    if (!rows.empty()) {
        for (const auto& [a, _] : rows[0].report.aspect_stats) {
            aspects.push_back(a);
            out << "  " << a;
        }
    }
    out << "\n";
    char buf[64];
    for (const AblationRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%-27s %.1f", r.name.c_str(),
                      r.report.overall_average);
        out << buf;
        for (const auto& a : aspects) {
            auto it = r.report.aspect_stats.find(a);
            if (it == r.report.aspect_stats.end()) {
                out << "  -";
            } else {
                std::snprintf(buf, sizeof(buf), "  %.1f", it->second.first);
                out << buf;
            }
        }
        out << "\n";
    }
    return out.str();
}

}  // namespace mcg::eval

#include "mcg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace mcg::trainer {

using corpus::Sample;
using losses::LossBreakdown;
using nn::Node;
using nn::Tape;
using nn::Tensor;

namespace {

void check(bool ok, const std::string& msg) {
    if (!ok) {
        throw std::invalid_argument(msg);
    }
}

const std::set<std::string> kDroppable = {"cls", "gap", "mul", "r_intv", "d_intv"};

const Sample& uniform_from(const std::vector<int>& pool, const TrainData& data, Rng& rng,
                           const char* who) {
    if (pool.empty()) {
        throw std::runtime_error(std::string(who) + ": empty candidate pool");
    }
    return data.sample(pool[rng.uniform_index(pool.size())]);
}

}  // namespace

// ----------------------------------------------------------------------------
// Config.

nlohmann::json TrainConfig::to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"lr", lr},
            {"loss_weights", loss_weights},
            {"gamma", gamma},
            {"lambda", lambda},
            {"seed", seed},
            {"counterfactual", counterfactual},
            {"resample", resample},
            {"drop_losses", std::vector<std::string>(drop_losses.begin(), drop_losses.end())},
            {"imbalanced_aspect", imbalanced_aspect},
            {"centroid_momentum", centroid_momentum}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lr = j.at("lr").get<double>();
    c.loss_weights = j.at("loss_weights").get<std::map<std::string, double>>();
    c.gamma = j.at("gamma").get<double>();
    c.lambda = j.at("lambda").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.counterfactual = j.at("counterfactual").get<bool>();
    c.resample = j.at("resample").get<bool>();
    for (const auto& s : j.at("drop_losses")) {
        c.drop_losses.insert(s.get<std::string>());
    }
    c.imbalanced_aspect = j.at("imbalanced_aspect").get<int>();
    c.centroid_momentum = j.at("centroid_momentum").get<double>();
    return c;
}

void TrainConfig::validate(const corpus::AttributeSchema& schema) const {
    check(epochs > 0 && batch_size > 0, "train config: epochs and batch size must be positive");
    check(lr > 0.0, "train config: learning rate must be positive");
    check(gamma > 0.0, "train config: gamma must be positive");
    check(lambda >= 0.0, "train config: lambda must be non-negative");
    check(centroid_momentum >= 0.0 && centroid_momentum <= 1.0,
          "train config: centroid momentum must lie in [0, 1]");
    check(imbalanced_aspect >= 0 && imbalanced_aspect < schema.n_aspects(),
          "train config: imbalanced aspect out of range");
    check(imbalanced_aspect != schema.implicit_aspect(),
          "train config: the imbalanced aspect must be explicit-labeled");
    for (const std::string& name : {"rec", "cls", "gap", "mul", "r_intv", "d_intv"}) {
        check(loss_weights.count(name) > 0,
              std::string("train config: missing loss weight '") + name + "'");
    }
    for (const std::string& d : drop_losses) {
        check(kDroppable.count(d) > 0, "train config: unknown drop-loss '" + d + "'");
    }
}

// ----------------------------------------------------------------------------
// Centroid tracker.

void CentroidTracker::update(const std::vector<std::pair<CellKey, Tensor>>& batch_latents) {
    std::map<CellKey, std::pair<Tensor, long>> sums;
    for (const auto& [key, z] : batch_latents) {
        check(static_cast<int>(z.size()) == dim_, "centroid tracker: dimension mismatch");
        check(z.all_finite(), "centroid tracker: non-finite latent");
        auto it = sums.find(key);
        if (it == sums.end()) {
            sums.emplace(key, std::make_pair(z, 1L));
        } else {
            for (std::size_t i = 0; i < z.size(); ++i) {
                it->second.first[i] += z[i];
            }
            ++it->second.second;
        }
    }
    for (auto& [key, acc] : sums) {
        Tensor mean = acc.first;
        for (auto& v : mean.data) {
            v /= static_cast<double>(acc.second);
        }
        auto it = cells_.find(key);
        if (it == cells_.end()) {
            cells_.emplace(key, Cell{std::move(mean), acc.second});
        } else {
            for (std::size_t i = 0; i < mean.size(); ++i) {
                it->second.value[i] =
                    momentum_ * it->second.value[i] + (1.0 - momentum_) * mean[i];
            }
            it->second.count += acc.second;
        }
    }
}

std::optional<Tensor> CentroidTracker::centroid(const CellKey& key) const {
    auto it = cells_.find(key);
    if (it == cells_.end()) {
        return std::nullopt;
    }
    return it->second.value;
}

long CentroidTracker::count(const CellKey& key) const {
    auto it = cells_.find(key);
    return it == cells_.end() ? 0 : it->second.count;
}

// ----------------------------------------------------------------------------
// Train data and sampling.

TrainData TrainData::from_samples(const corpus::AttributeSchema& schema,
                                  const corpus::Vocabulary& vocab,
                                  std::vector<corpus::Sample> samples) {
    TrainData d;
    d.schema = schema;
    d.vocab = vocab;
    d.samples = std::move(samples);
    d.index = corpus::index_corpus(d.samples);
    for (const Sample& s : d.samples) {
        d.by_id[s.id] = &s;
    }
    d.implicit_aspect = schema.implicit_aspect();
    return d;
}

const Sample& TrainData::sample(int id) const {
    auto it = by_id.find(id);
    check(it != by_id.end(), "train data: unknown sample id " + std::to_string(id));
    return *it->second;
}

const Sample& resample_opposite(const TrainData& data, const Sample& anchor, Rng& rng) {
    const int s = data.implicit_aspect;
    check(s >= 0, "resample_opposite: schema has no implicit-annotated aspect");
    auto it = anchor.implicit_attrs.find(s);
    check(it != anchor.implicit_attrs.end(), "resample_opposite: anchor lacks an implicit label");
    const int opposite = 1 - it->second;
    const auto& cell =
        data.index.cell(anchor.explicit_aspect, anchor.explicit_attr, s, opposite);
    if (cell.empty()) {
        throw std::runtime_error(
            "resample_opposite: opposite-implicit cell is empty (degenerate corpus)");
    }
    return uniform_from(cell, data, rng, "resample_opposite");
}

const Sample& sample_partner_same_implicit(const TrainData& data, const Sample& anchor,
                                           Rng& rng) {
    const int s = data.implicit_aspect;
    check(s >= 0, "sample_partner_same_implicit: schema has no implicit-annotated aspect");
    auto it = anchor.implicit_attrs.find(s);
    check(it != anchor.implicit_attrs.end(),
          "sample_partner_same_implicit: anchor lacks an implicit label");
    std::vector<int> pool;
    const int t = anchor.explicit_aspect;
    for (int a = 0; a < data.schema.n_attrs(t); ++a) {
        if (a == anchor.explicit_attr) {
            continue;
        }
        const auto& cell = data.index.cell(t, a, s, it->second);
        pool.insert(pool.end(), cell.begin(), cell.end());
    }
    if (pool.empty()) {
        throw std::runtime_error("sample_partner_same_implicit: empty candidate pool");
    }
    return uniform_from(pool, data, rng, "sample_partner_same_implicit");
}

const Sample& sample_partner_opposite_implicit(const TrainData& data, const Sample& anchor,
                                               Rng& rng) {
    const int s = data.implicit_aspect;
    check(s >= 0, "sample_partner_opposite_implicit: schema has no implicit-annotated aspect");
    auto it = anchor.implicit_attrs.find(s);
    check(it != anchor.implicit_attrs.end(),
          "sample_partner_opposite_implicit: anchor lacks an implicit label");
    const int opposite = 1 - it->second;
    std::vector<int> pool;
    for (const auto& [key, ids] : data.index.cells) {
        if (key[2] == s && key[3] == opposite) {
            pool.insert(pool.end(), ids.begin(), ids.end());
        }
    }
    if (pool.empty()) {
        throw std::runtime_error("sample_partner_opposite_implicit: empty candidate pool");
    }
    return uniform_from(pool, data, rng, "sample_partner_opposite_implicit");
}

CfVector build_counterfactual_vector(const Tensor& h_explicit_anchor,
                                     const Tensor& h_implicit_partner, const Sample& anchor,
                                     const Sample& partner, int implicit_aspect) {
    check(h_explicit_anchor.size() == h_implicit_partner.size(),
          "build_counterfactual_vector: dimension mismatch");
    CfVector out;
    out.z = h_explicit_anchor;
    for (std::size_t i = 0; i < out.z.size(); ++i) {
        out.z[i] += h_implicit_partner[i];
    }
    out.explicit_aspect = anchor.explicit_aspect;
    out.explicit_attr = anchor.explicit_attr;
    out.implicit_aspect = implicit_aspect;
    const auto it = partner.explicit_aspect == implicit_aspect
                        ? partner.implicit_attrs.end()
                        : partner.implicit_attrs.find(implicit_aspect);
    out.implicit_attr = partner.explicit_aspect == implicit_aspect
                            ? partner.explicit_attr
                            : (it != partner.implicit_attrs.end() ? it->second : -1);
    check(out.implicit_attr >= 0, "build_counterfactual_vector: partner lacks implicit label");
    return out;
}

// ----------------------------------------------------------------------------
// One step.

StepResult train_step(net::Model& model, const net::Decoder& decoder, const TrainData& data,
                      const std::vector<int>& batch_ids, CentroidTracker& tracker,
                      const TrainConfig& cfg, nn::AdamW& opt, Rng& sample_rng, Rng& noise_rng) {
    check(!batch_ids.empty(), "train_step: empty batch");
    const int s = data.implicit_aspect;
    const int t_imb = cfg.imbalanced_aspect;
    const bool use_cf = cfg.counterfactual && s >= 0;

    StepResult result;
    result.base_samples = static_cast<int>(batch_ids.size());

    // Effective batch: base draws plus one opposite-implicit companion per
    // imbalanced-aspect anchor.
    std::vector<int> effective = batch_ids;
    if (cfg.resample && s >= 0) {
        for (int id : batch_ids) {
            const Sample& anchor = data.sample(id);
            if (anchor.explicit_aspect != t_imb || !anchor.implicit_attrs.count(s)) {
                continue;
            }
            const Sample& companion = resample_opposite(data, anchor, sample_rng);
            result.companions[id] = companion.id;
            effective.push_back(companion.id);
        }
    }
    result.effective_samples = static_cast<int>(effective.size());

    Tape tape;
    auto enc_bound = model.encoder().bind(tape, false);
    auto dis_bound = model.disentangler().bind(tape, false);
    auto mlp_bound = model.prefix_mlp().bind(tape, false);
    auto dec_bound = decoder.bind(tape, true);

    losses::ProbeMap z_probes;
    for (int t = 0; t < model.schema().n_aspects(); ++t) {
        z_probes[t] = {&model.z_probe(t), model.z_probe(t).bind(tape, false)};
    }
    losses::ProbeMap factor_probes;
    for (int t = 0; t < model.schema().n_aspects(); ++t) {
        if (t == s) {
            continue;
        }
        factor_probes[t] = {&model.mu_probe(t), model.mu_probe(t).bind(tape, false)};
    }
    if (s >= 0) {
        factor_probes[s] = {&model.sigma_probe(), model.sigma_probe().bind(tape, false)};
    }

    struct SampleNodes {
        const Sample* sample;
        Node* h_explicit;
        Node* h_implicit;
        Node* z;
    };
    std::map<int, SampleNodes> built;
    auto nodes_for = [&](int id) -> SampleNodes& {
        auto it = built.find(id);
        if (it != built.end()) {
            return it->second;
        }
        const Sample& smp = data.sample(id);
        Node* h = model.encoder().forward(tape, enc_bound, data.vocab.encode(smp.text));
        auto f = model.disentangler().forward(tape, dis_bound, h);
        return built.emplace(id, SampleNodes{&smp, f.h_explicit, f.h_implicit, f.z}).first
            ->second;
    };

    const bool want_cls = cfg.drop_losses.count("cls") == 0;
    const bool want_gap = cfg.drop_losses.count("gap") == 0;
    const bool want_mul = cfg.drop_losses.count("mul") == 0;
    const bool want_rintv = cfg.drop_losses.count("r_intv") == 0 && s >= 0;
    const bool want_dintv = cfg.drop_losses.count("d_intv") == 0 && use_cf;

    std::vector<Node*> rec_prefixes;
    std::vector<net::TokenIds> rec_texts;
    std::vector<losses::LabeledLatent> plain_latents;
    std::vector<losses::CfLatentPair> cf_pairs;
    std::map<int, std::vector<Node*>> gap_groups;  // explicit aspect -> latents
    std::vector<losses::LabeledFactor> factors;
    std::vector<losses::InterventionEntry> intv_entries;
    std::vector<losses::DistanceEntry> dist_entries;
    std::vector<std::pair<CentroidTracker::CellKey, Tensor>> tracker_update;

    for (int id : effective) {
        SampleNodes& sn = nodes_for(id);
        const Sample& smp = *sn.sample;

        // Prefix noise: one standard-normal draw per sample per step.
        Node* z_for_prefix = sn.z;
        if (cfg.lambda > 0.0) {
            Tensor eps({1, model.config().d_h});
            for (auto& v : eps.data) {
                v = cfg.lambda * noise_rng.gauss();
            }
            z_for_prefix = tape.add(sn.z, tape.constant(std::move(eps)));
        }
        rec_prefixes.push_back(model.prefix_mlp().forward(tape, mlp_bound, z_for_prefix));
        rec_texts.push_back(data.vocab.encode(smp.text));

        const bool imbalanced_member =
            use_cf && smp.explicit_aspect == t_imb && smp.implicit_attrs.count(s) > 0;

        // Classification: the imbalanced aspect uses the counterfactual variant.
        if (want_cls && !imbalanced_member) {
            plain_latents.push_back({sn.z, smp.explicit_aspect, smp.explicit_attr});
        }

        gap_groups[smp.explicit_aspect].push_back(sn.z);

        const bool annotated = s >= 0 && smp.implicit_attrs.count(s) > 0;
        Node* z_cf = nullptr;
        int cf_implicit_attr = -1;
        if (annotated && use_cf && smp.explicit_aspect == t_imb) {
            const Sample& partner = sample_partner_opposite_implicit(data, smp, sample_rng);
            SampleNodes& pn = nodes_for(partner.id);
            z_cf = tape.add(sn.h_explicit, pn.h_implicit);
            cf_implicit_attr = partner.explicit_aspect == s
                                   ? partner.explicit_attr
                                   : partner.implicit_attrs.at(s);
            if (want_cls) {
                cf_pairs.push_back({sn.z, z_cf, smp.explicit_attr});
            }
            if (want_dintv) {
                const CentroidTracker::CellKey key = {smp.explicit_aspect, smp.explicit_attr,
                                                      s, cf_implicit_attr};
                const auto c = tracker.centroid(key);
                if (c.has_value()) {
                    dist_entries.push_back({z_cf, *c});
                } else {
                    ++result.skipped_distance_terms;
                }
            }
        }

        if (annotated) {
            if (want_mul) {
                factors.push_back({sn.h_explicit, smp.explicit_aspect, smp.explicit_attr});
                factors.push_back({sn.h_implicit, s, smp.implicit_attrs.at(s)});
            }
            if (want_rintv) {
                const Sample& partner = sample_partner_same_implicit(data, smp, sample_rng);
                SampleNodes& pn = nodes_for(partner.id);
                intv_entries.push_back({sn.h_explicit, pn.h_implicit,
                                        data.vocab.encode(smp.text), smp.id, partner.id,
                                        smp.explicit_attr, partner.explicit_attr,
                                        smp.implicit_attrs.at(s),
                                        partner.implicit_attrs.at(s)});
            }
            tracker_update.push_back(
                {{smp.explicit_aspect, smp.explicit_attr, s, smp.implicit_attrs.at(s)},
                 sn.z->val});
        }
    }

    // Counterfactual aspect-gap variant replaces the pairs involving the
    // imbalanced aspect; the remaining aspects keep the plain form.
    std::map<std::string, Node*> components;
    components["rec"] = losses::reconstruction_loss(tape, decoder, dec_bound, rec_prefixes,
                                                    rec_texts);
    if (want_cls && !plain_latents.empty()) {
        components["cls"] = losses::classification_loss(tape, plain_latents, z_probes);
    }
    if (want_cls && !cf_pairs.empty()) {
        components["cls_cf"] = losses::classification_loss_cf(tape, cf_pairs,
                                                              z_probes.at(t_imb));
    }
    if (want_gap) {
        if (use_cf && !cf_pairs.empty()) {
            std::vector<std::vector<Node*>> others;
            std::vector<std::vector<Node*>> rest;
            for (auto& [aspect, group] : gap_groups) {
                if (aspect != t_imb) {
                    others.push_back(group);
                    rest.push_back(group);
                }
            }
            if (!others.empty()) {
                components["gap_cf"] = losses::aspect_gap_loss_cf(tape, cf_pairs, others);
            }
            if (rest.size() >= 2) {
                components["gap"] = losses::aspect_gap_loss(tape, rest);
            }
        } else if (gap_groups.size() >= 2) {
            std::vector<std::vector<Node*>> groups;
            for (auto& [aspect, group] : gap_groups) {
                groups.push_back(group);
            }
            components["gap"] = losses::aspect_gap_loss(tape, groups);
        }
    }
    if (want_mul && !factors.empty()) {
        components["mul"] = losses::multitask_loss(tape, factors, factor_probes);
    }
    if (want_rintv && !intv_entries.empty()) {
        components["r_intv"] = losses::intervention_reconstruction_loss(
            tape, decoder, dec_bound, model.prefix_mlp(), mlp_bound, intv_entries);
    }
    if (want_dintv && !dist_entries.empty()) {
        components["d_intv"] = losses::intervention_distance_loss(tape, dist_entries,
                                                                  cfg.gamma);
    }

    Node* total = losses::weighted_total(tape, components, cfg.loss_weights);
    Node* objective = tape.scale(total, 1.0 / static_cast<double>(effective.size()));

    std::map<std::string, double> component_values;
    for (const auto& [name, node] : components) {
        component_values[name] = node->val[0];
    }
    result.breakdown = losses::total_loss(component_values, cfg.loss_weights);
    if (!std::isfinite(result.breakdown.total)) {
        throw std::runtime_error("train_step: non-finite loss; breakdown: " +
                                 result.breakdown.to_json().dump());
    }

    tape.backward(objective);
    tape.harvest();
    opt.step(model.trainable_params());

    // Centroids track the step's pre-update latents.
    tracker.update(tracker_update);
    return result;
}

// ----------------------------------------------------------------------------
// Full loop.

TrainResult train(net::Model& model, const net::Decoder& decoder,
                  const corpus::CorpusFile& corpus_file, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir, const std::string& corpus_digest,
                  const std::string& run_config_digest) {
    cfg.validate(corpus_file.schema);
    check(model.schema().hash() == corpus_file.schema.hash(),
          "train: model/corpus schema mismatch");

    const std::uint64_t decoder_digest_before = decoder.param_digest();

    const corpus::SplitIds split = corpus::heldout_split(corpus_file.samples);
    std::vector<Sample> train_samples;
    for (const Sample& smp : corpus_file.samples) {
        if (std::binary_search(split.train.begin(), split.train.end(), smp.id)) {
            train_samples.push_back(smp);
        }
    }
    const TrainData data =
        TrainData::from_samples(corpus_file.schema, corpus_file.vocab, std::move(train_samples));

    Rng master(cfg.seed);
    Rng order_rng = master.derive("batch-order");
    Rng sample_rng = master.derive("partner-sampling");
    Rng noise_rng = master.derive("prefix-noise");

    nn::AdamW opt(nn::AdamWConfig{.lr = cfg.lr, .weight_decay = 0.01});
    CentroidTracker tracker(model.config().d_h, cfg.centroid_momentum);

    std::filesystem::create_directories(out_dir);
    const std::filesystem::path log_path = out_dir / "train_log.jsonl";
    std::ofstream log(log_path, std::ios::trunc);
    check(log.good(), "train: cannot open training log");

    std::vector<int> ids;
    for (const Sample& smp : data.samples) {
        ids.push_back(smp.id);
    }
    std::sort(ids.begin(), ids.end());

    TrainResult result;
    result.log_path = log_path;
    nlohmann::json extra = {{"train_config", cfg.to_json()},
                            {"config_digest", to_hex(fnv1a(cfg.to_json().dump()))},
                            {"corpus_digest", corpus_digest}};

    double best = std::numeric_limits<double>::infinity();
    long step_index = 0;
    const auto run_start = std::chrono::steady_clock::now();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(ids);
        double epoch_total = 0.0;
        long epoch_steps = 0;
        for (std::size_t start = 0; start < ids.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop =
                std::min(ids.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::vector<int> batch(ids.begin() + static_cast<std::ptrdiff_t>(start),
                                         ids.begin() + static_cast<std::ptrdiff_t>(stop));
            const StepResult sr =
                train_step(model, decoder, data, batch, tracker, cfg, opt, sample_rng, noise_rng);
            result.skipped_distance_terms += sr.skipped_distance_terms;
            epoch_total += sr.breakdown.total / sr.effective_samples;
            ++epoch_steps;

            nlohmann::json rec = sr.breakdown.to_json();
            rec["step"] = step_index;
            rec["epoch"] = epoch;
            rec["scale"] = 1.0 / sr.effective_samples;
            rec["wall_ms"] = std::chrono::duration<double, std::milli>(
                                 std::chrono::steady_clock::now() - run_start)
                                 .count();
            log << rec.dump() << "\n";
            ++step_index;
        }
        const double epoch_mean = epoch_total / static_cast<double>(epoch_steps);
        if (epoch_mean < best) {
            best = epoch_mean;
            result.best_epoch = epoch;
            result.best_epoch_loss = epoch_mean;
            net::save_model(out_dir / "ckpt_best", model, corpus_digest, run_config_digest,
                            extra);
        }
    }
    result.steps = step_index;
    net::save_model(out_dir / "ckpt_final", model, corpus_digest, run_config_digest, extra);
    result.best_dir = out_dir / "ckpt_best";
    result.final_dir = out_dir / "ckpt_final";
    log.close();

    if (decoder.param_digest() != decoder_digest_before) {
        throw std::runtime_error("train: frozen decoder parameters changed during the run");
    }
    return result;
}

}  // namespace mcg::trainer

#include "mcg/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace mcg::losses {

namespace {

void check(bool ok, const std::string& msg) {
    if (!ok) {
        throw std::invalid_argument(msg);
    }
}

const BoundProbe& probe_for(const ProbeMap& probes, int aspect, const char* who) {
    auto it = probes.find(aspect);
    if (it == probes.end()) {
        throw std::invalid_argument(std::string(who) + ": missing probe for aspect " +
                                    std::to_string(aspect));
    }
    return it->second;
}

Node* zero_scalar(Tape& tape) {
    return tape.constant(nn::Tensor({1}, 0.0));
}

}  // namespace

Node* reconstruction_loss(Tape& tape, const net::Decoder& decoder,
                          const net::Decoder::Bound& dec_bound, std::span<Node* const> prefixes,
                          std::span<const net::TokenIds> texts) {
    check(prefixes.size() == texts.size(), "reconstruction_loss: misaligned batch");
    check(!prefixes.empty(), "reconstruction_loss: empty batch");
    std::vector<Node*> terms;
    terms.reserve(prefixes.size());
    for (std::size_t i = 0; i < prefixes.size(); ++i) {
        terms.push_back(decoder.nll(tape, dec_bound, prefixes[i], texts[i]));
    }
    return tape.add_scalars(terms);
}

Node* classification_loss(Tape& tape, std::span<const LabeledLatent> latents,
                          const ProbeMap& probes) {
    check(!latents.empty(), "classification_loss: empty batch");
    std::vector<Node*> terms;
    terms.reserve(latents.size());
    for (const LabeledLatent& l : latents) {
        const BoundProbe& bp = probe_for(probes, l.aspect, "classification_loss");
        Node* logits = bp.probe->logits(tape, bp.leaves, l.z);
        terms.push_back(tape.cross_entropy_rows(logits, {l.attr}));
    }
    return tape.add_scalars(terms);
}

Node* aspect_gap_loss(Tape& tape, const std::vector<std::vector<Node*>>& groups) {
    check(!groups.empty(), "aspect_gap_loss: no aspect groups");
    for (const auto& g : groups) {
        check(!g.empty(), "aspect_gap_loss: empty aspect group");
    }
    if (groups.size() < 2) {
        return zero_scalar(tape);  // no pairs
    }
    std::vector<Node*> means;
    means.reserve(groups.size());
    for (const auto& g : groups) {
        means.push_back(tape.mean_of(g));
    }
    std::vector<Node*> terms;
    for (std::size_t i = 0; i + 1 < means.size(); ++i) {
        for (std::size_t j = i + 1; j < means.size(); ++j) {
            terms.push_back(tape.sum_sq_diff(means[i], means[j]));
        }
    }
    return tape.add_scalars(terms);
}

Node* classification_loss_cf(Tape& tape, std::span<const CfLatentPair> pairs,
                             const BoundProbe& probe) {
    check(!pairs.empty(), "classification_loss_cf: empty batch");
    std::vector<Node*> terms;
    terms.reserve(pairs.size() * 2);
    for (const CfLatentPair& p : pairs) {
        check(p.z != nullptr && p.z_cf != nullptr,
              "classification_loss_cf: missing counterfactual latent");
        // log(p(a|Z) * p(a|Zbar)) splits into two NLL terms.
        terms.push_back(
            tape.cross_entropy_rows(probe.probe->logits(tape, probe.leaves, p.z), {p.attr}));
        terms.push_back(
            tape.cross_entropy_rows(probe.probe->logits(tape, probe.leaves, p.z_cf), {p.attr}));
    }
    return tape.add_scalars(terms);
}

Node* aspect_gap_loss_cf(Tape& tape, const std::vector<CfLatentPair>& imbalanced_group,
                         const std::vector<std::vector<Node*>>& other_groups) {
    check(!imbalanced_group.empty(), "aspect_gap_loss_cf: empty imbalanced group");
    for (const auto& g : other_groups) {
        check(!g.empty(), "aspect_gap_loss_cf: empty aspect group");
    }
    if (other_groups.empty()) {
        return zero_scalar(tape);
    }
    std::vector<Node*> halves;
    halves.reserve(imbalanced_group.size());
    for (const CfLatentPair& p : imbalanced_group) {
        check(p.z != nullptr && p.z_cf != nullptr,
              "aspect_gap_loss_cf: missing counterfactual latent");
        halves.push_back(tape.scale(tape.add(p.z, p.z_cf), 0.5));
    }
    Node* cf_mean = tape.mean_of(halves);
    std::vector<Node*> terms;
    for (const auto& g : other_groups) {
        terms.push_back(tape.sum_sq_diff(cf_mean, tape.mean_of(g)));
    }
    return tape.add_scalars(terms);
}

Node* multitask_loss(Tape& tape, std::span<const LabeledFactor> factors,
                     const ProbeMap& factor_probes) {
    check(!factors.empty(), "multitask_loss: empty batch");
    std::vector<Node*> terms;
    terms.reserve(factors.size());
    for (const LabeledFactor& f : factors) {
        const BoundProbe& bp = probe_for(factor_probes, f.aspect, "multitask_loss");
        check(bp.probe->aspect() == f.aspect, "multitask_loss: factor/probe aspect mismatch");
        Node* logits = bp.probe->logits(tape, bp.leaves, f.factor);
        terms.push_back(tape.cross_entropy_rows(logits, {f.attr}));
    }
    return tape.add_scalars(terms);
}

Node* intervention_reconstruction_loss(Tape& tape, const net::Decoder& decoder,
                                       const net::Decoder::Bound& dec_bound,
                                       const net::PrefixMlp& prefix_mlp,
                                       const net::PrefixMlp::Bound& mlp_bound,
                                       std::span<const InterventionEntry> entries) {
    check(!entries.empty(), "intervention_reconstruction_loss: empty batch");
    std::vector<Node*> terms;
    terms.reserve(entries.size());
    for (const InterventionEntry& e : entries) {
        if (e.partner_id != e.anchor_id) {
            check(e.partner_implicit_attr == e.anchor_implicit_attr,
                  "intervention_reconstruction_loss: partner implicit attribute differs");
            check(e.partner_explicit_attr != e.anchor_explicit_attr,
                  "intervention_reconstruction_loss: partner shares the explicit attribute");
        }
        Node* composed = tape.add(e.h_explicit_anchor, e.h_implicit_partner);
        Node* prefix = prefix_mlp.forward(tape, mlp_bound, composed);
        terms.push_back(decoder.nll(tape, dec_bound, prefix, e.text));
    }
    return tape.add_scalars(terms);
}

Node* intervention_distance_loss(Tape& tape, std::span<const DistanceEntry> entries,
                                 double gamma) {
    check(gamma > 0.0, "intervention_distance_loss: gamma must be positive");
    check(!entries.empty(), "intervention_distance_loss: empty batch");
    std::vector<Node*> terms;
    terms.reserve(entries.size());
    for (const DistanceEntry& e : entries) {
        check(e.z_cf != nullptr, "intervention_distance_loss: missing counterfactual latent");
        check(e.centroid.size() == e.z_cf->val.size(),
              "intervention_distance_loss: centroid dimension mismatch");
        nn::Tensor c({1, static_cast<int>(e.centroid.size())});
        c.data = e.centroid.data;
        terms.push_back(tape.euclidean_hinge(e.z_cf, tape.constant(std::move(c)), gamma));
    }
    return tape.add_scalars(terms);
}

// ----------------------------------------------------------------------------
// Weighted total.

std::map<std::string, double> default_loss_weights() {
    return {{"rec", 0.5}, {"cls", 0.2},    {"gap", 0.3},
            {"mul", 0.2}, {"r_intv", 0.5}, {"d_intv", 0.2}};
}

namespace {

const std::map<std::string, std::string>& weight_key_of_component() {
    static const std::map<std::string, std::string> m = {
        {"rec", "rec"},       {"cls", "cls"}, {"gap", "gap"},       {"cls_cf", "cls"},
        {"gap_cf", "gap"},    {"mul", "mul"}, {"r_intv", "r_intv"}, {"d_intv", "d_intv"},
    };
    return m;
}

double weight_for(const std::map<std::string, double>& weights, const std::string& component) {
    const auto& keys = weight_key_of_component();
    auto kit = keys.find(component);
    if (kit == keys.end()) {
        throw std::invalid_argument("total_loss: unknown component '" + component + "'");
    }
    auto wit = weights.find(kit->second);
    if (wit == weights.end()) {
        throw std::invalid_argument("total_loss: missing weight '" + kit->second + "'");
    }
    return wit->second;
}

}  // namespace

nlohmann::json LossBreakdown::to_json() const {
    return {{"rec", rec},       {"cls", cls},     {"gap", gap},       {"cls_cf", cls_cf},
            {"gap_cf", gap_cf}, {"mul", mul},     {"r_intv", r_intv}, {"d_intv", d_intv},
            {"total", total},   {"weights", weights}};
}

LossBreakdown total_loss(const std::map<std::string, double>& components,
                         const std::map<std::string, double>& weights) {
    LossBreakdown out;
    double total = 0.0;
    for (const auto& [name, value] : components) {
        if (!std::isfinite(value)) {
            throw std::runtime_error("total_loss: component '" + name + "' is not finite");
        }
        const double w = weight_for(weights, name);
        out.weights[name] = w;
        total += w * value;
        if (name == "rec") out.rec = value;
        else if (name == "cls") out.cls = value;
        else if (name == "gap") out.gap = value;
        else if (name == "cls_cf") out.cls_cf = value;
        else if (name == "gap_cf") out.gap_cf = value;
        else if (name == "mul") out.mul = value;
        else if (name == "r_intv") out.r_intv = value;
        else if (name == "d_intv") out.d_intv = value;
    }
    out.total = total;
    return out;
}

Node* weighted_total(Tape& tape, const std::map<std::string, Node*>& components,
                     const std::map<std::string, double>& weights) {
    check(!components.empty(), "weighted_total: no components");
    std::vector<Node*> terms;
    terms.reserve(components.size());
    for (const auto& [name, node] : components) {
        terms.push_back(tape.scale(node, weight_for(weights, name)));
    }
    return tape.add_scalars(terms);
}

}  // namespace mcg::losses

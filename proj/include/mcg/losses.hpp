#pragma once

// Training objectives as pure functions over tape nodes. Every loss returns an
// unscaled sum over its batch entries; the trainer applies the 1/batch-size
// factor once on the weighted total. Counterfactual variants substitute for
// the plain classification / aspect-gap terms on the designated imbalanced
// aspect and reuse one shared counterfactual latent per anchor.

#include <map>
#include <span>
#include <string>

#include "mcg/netcore.hpp"

namespace mcg::losses {

using nn::Node;
using nn::Tape;

struct BoundProbe {
    const net::Probe* probe = nullptr;
    net::Probe::Bound leaves{};
};
using ProbeMap = std::map<int, BoundProbe>;  // aspect -> bound probe

// -sum_i log p(x_i | prefix_i). Batches must be aligned one prefix per text.
Node* reconstruction_loss(Tape& tape, const net::Decoder& decoder,
                          const net::Decoder::Bound& dec_bound, std::span<Node* const> prefixes,
                          std::span<const net::TokenIds> texts);

struct LabeledLatent {
    Node* z = nullptr;
    int aspect = 0;
    int attr = 0;
};

// -sum over labeled latents of log p_probe(label | z), summed across aspects.
Node* classification_loss(Tape& tape, std::span<const LabeledLatent> latents,
                          const ProbeMap& probes);

// Sum over aspect pairs of the squared L2 distance between per-aspect means.
// A single group has no pairs and costs zero; an empty group is an error.
Node* aspect_gap_loss(Tape& tape, const std::vector<std::vector<Node*>>& groups);

struct CfLatentPair {
    Node* z = nullptr;
    Node* z_cf = nullptr;  // shared counterfactual latent for the anchor
    int attr = 0;
};

// -sum_i log( p(a_i | Z_i) * p(a_i | Zbar_i) ) for the imbalanced aspect.
Node* classification_loss_cf(Tape& tape, std::span<const CfLatentPair> pairs,
                             const BoundProbe& probe);

// Sum over other aspects t1 of || mean_i (Z_i + Zbar_i)/2  -  mean_{j in t1} Z_j ||^2.
Node* aspect_gap_loss_cf(Tape& tape, const std::vector<CfLatentPair>& imbalanced_group,
                         const std::vector<std::vector<Node*>>& other_groups);

struct LabeledFactor {
    Node* factor = nullptr;
    int aspect = 0;
    int attr = 0;
};

// Per-aspect NLL of the matching factor probe on the matching control factor.
Node* multitask_loss(Tape& tape, std::span<const LabeledFactor> factors,
                     const ProbeMap& factor_probes);

struct InterventionEntry {
    Node* h_explicit_anchor = nullptr;
    Node* h_implicit_partner = nullptr;
    net::TokenIds text;  // the anchor's text, to be reconstructed
    int anchor_id = 0;
    int partner_id = 0;
    int anchor_explicit_attr = 0;
    int partner_explicit_attr = 0;
    int anchor_implicit_attr = 0;
    int partner_implicit_attr = 0;
};

// Builds Prefix = MLP(h_mu_anchor + h_sigma_partner) and scores the anchor's
// text under it. The partner must share the anchor's implicit attribute and
// differ in the explicit one (a partner equal to the anchor itself is the
// degenerate identity case and is allowed).
Node* intervention_reconstruction_loss(Tape& tape, const net::Decoder& decoder,
                                       const net::Decoder::Bound& dec_bound,
                                       const net::PrefixMlp& prefix_mlp,
                                       const net::PrefixMlp::Bound& mlp_bound,
                                       std::span<const InterventionEntry> entries);

struct DistanceEntry {
    Node* z_cf = nullptr;     // counterfactual latent for the anchor
    nn::Tensor centroid;      // detached cell centroid (EMA estimate)
};

// Sum of hinge terms max(d(Zbar_i, Zhat_i) - gamma, 0), Euclidean d.
Node* intervention_distance_loss(Tape& tape, std::span<const DistanceEntry> entries,
                                 double gamma);

// ----------------------------------------------------------------------------
// Weighted total.

inline constexpr double kDefaultGamma = 0.4;

// Per-component scaling factors; defaults follow the reference configuration
// (rec, cls, gap, mul, r_intv, d_intv) = (0.5, 0.2, 0.3, 0.2, 0.5, 0.2).
std::map<std::string, double> default_loss_weights();

struct LossBreakdown {
    double rec = 0.0;
    double cls = 0.0;
    double gap = 0.0;
    double cls_cf = 0.0;
    double gap_cf = 0.0;
    double mul = 0.0;
    double r_intv = 0.0;
    double d_intv = 0.0;
    double total = 0.0;
    std::map<std::string, double> weights;  // effective weight per component

    nlohmann::json to_json() const;
};

// Assembles the breakdown; counterfactual components take the weight of the
// term they substitute for. Throws when a required weight is missing or a
// component is non-finite.
LossBreakdown total_loss(const std::map<std::string, double>& components,
                         const std::map<std::string, double>& weights);

// Tape-side weighted sum matching total_loss's arithmetic.
Node* weighted_total(Tape& tape, const std::map<std::string, Node*>& components,
                     const std::map<std::string, double>& weights);

}  // namespace mcg::losses

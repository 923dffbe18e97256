#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mcg/losses.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

using namespace mcg;
using namespace mcg::losses;
using net::Decoder;
using net::DecoderConfig;
using net::TokenIds;
using nn::Node;
using nn::Param;
using nn::Tape;
using nn::Tensor;

namespace {

corpus::Vocabulary test_vocab() {
    return corpus::Vocabulary::from_schema(corpus::desk_schema());
}

Decoder tiny_decoder(std::uint64_t seed = 9) {
    Rng rng(seed);
    return Decoder(DecoderConfig{12, 2, 2, 24, 32, 3}, test_vocab(), rng);
}

net::Probe tiny_probe(int aspect, int d, int classes, std::uint64_t seed) {
    Rng rng(seed);
    return net::Probe(aspect, d, classes, rng);
}

Tensor row(std::initializer_list<double> xs) {
    Tensor t({1, static_cast<int>(xs.size())});
    std::size_t i = 0;
    for (double x : xs) t[i++] = x;
    return t;
}

oracles::Mat probe_w(net::Probe& p) {
    return oracles::to_mat(p.named_params("t")[0].second->value);
}

oracles::Mat probe_b(net::Probe& p) {
    return oracles::to_mat(p.named_params("t")[1].second->value);
}

}  // namespace

TEST_CASE("reconstruction loss: rigged decoder scores ~0, uniform identity, oracle match") {
    // A decoder whose head always puts probability ~1 on <eos> reconstructs the
    // empty sequence with ~zero loss.
    Decoder rigged = tiny_decoder(1);
    for (auto& [name, p] : rigged.named_params()) {
        p->value.zero();
        if (name == "dec.head_b") {
            p->value[static_cast<std::size_t>(rigged.vocab().eos)] = 60.0;
        }
    }
    {
        Tape tape;
        auto bound = rigged.bind(tape, true);
        Rng rng(3);
        Param prefix("p", Tensor::randn(rigged.prefix_shape().dims(), 0.3, rng));
        Node* pf = tape.param(prefix);
        std::vector<Node*> prefixes = {pf};
        std::vector<TokenIds> texts = {{}};
        Node* loss = reconstruction_loss(tape, rigged, bound, prefixes, texts);
        CHECK(loss->val[0] == doctest::Approx(0.0).epsilon(1e-9));
    }

    // Zeroed decoder: every conditional is uniform over |V|, so the loss of a
    // batch is (sum of (len+1)) * ln|V| with the <eos> target included.
    Decoder uniform = tiny_decoder(2);
    for (auto& [name, p] : uniform.named_params()) {
        p->value.zero();
    }
    {
        Tape tape;
        auto bound = uniform.bind(tape, true);
        Node* pf = tape.constant(Tensor(uniform.prefix_shape().dims(), 0.0));
        std::vector<Node*> prefixes = {pf, pf};
        std::vector<TokenIds> texts = {uniform.vocab().encode({"the", "a", "day"}),
                                       uniform.vocab().encode({"coach", "news", "item"})};
        Node* loss = reconstruction_loss(tape, uniform, bound, prefixes, texts);
        const double expect = 8.0 * std::log(uniform.vocab().size());
        CHECK(loss->val[0] == doctest::Approx(expect).epsilon(1e-9));
    }

    // Random fixture vs the sum of per-sample brute-force oracles.
    Decoder dec = tiny_decoder(5);
    Rng rng(7);
    const Tensor pr1 = Tensor::randn(dec.prefix_shape().dims(), 0.4, rng);
    const Tensor pr2 = Tensor::randn(dec.prefix_shape().dims(), 0.4, rng);
    const TokenIds t1 = dec.vocab().encode({"stadium", "awful", "day"});
    const TokenIds t2 = dec.vocab().encode({"treaty", "wonderful"});
    Tape tape;
    auto bound = dec.bind(tape, true);
    auto as_node = [&](const Tensor& t) {
        Tensor flat({1, static_cast<int>(t.size())});
        flat.data = t.data;
        return tape.constant(std::move(flat));
    };
    std::vector<Node*> prefixes = {as_node(pr1), as_node(pr2)};
    std::vector<TokenIds> texts = {t1, t2};
    Node* loss = reconstruction_loss(tape, dec, bound, prefixes, texts);
    const double want = -(oracles::decoder_logprob_oracle(dec, pr1, t1) +
                          oracles::decoder_logprob_oracle(dec, pr2, t2));
    CHECK(loss->val[0] == doctest::Approx(want).epsilon(1e-6));

    // Misaligned batch is rejected.
    std::vector<Node*> one = {as_node(pr1)};
    CHECK_THROWS(reconstruction_loss(tape, dec, bound, one, texts));
}

TEST_CASE("classification loss: perfect probe ~0, uniform 4ln2, NLL oracle") {
    net::Probe uniform_probe = tiny_probe(0, 4, 2, 1);
    for (auto& [n, p] : uniform_probe.named_params("u")) p->value.zero();

    Tape tape;
    ProbeMap probes;
    probes[0] = {&uniform_probe, uniform_probe.bind(tape, true)};

    std::vector<Node*> zs;
    Rng rng(11);
    for (int i = 0; i < 4; ++i) {
        zs.push_back(tape.constant(Tensor::randn({1, 4}, 1.0, rng)));
    }
    std::vector<LabeledLatent> latents;
    for (int i = 0; i < 4; ++i) {
        latents.push_back({zs[static_cast<std::size_t>(i)], 0, i % 2});
    }
    Node* loss = classification_loss(tape, latents, probes);
    CHECK(loss->val[0] == doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-12));

    // A probe with a huge bias on the true class drives the loss to ~0.
    net::Probe perfect = tiny_probe(0, 4, 2, 2);
    for (auto& [n, p] : perfect.named_params("pf")) p->value.zero();
    perfect.named_params("pf")[1].second->value[1] = 60.0;
    ProbeMap perfect_map;
    perfect_map[0] = {&perfect, perfect.bind(tape, true)};
    std::vector<LabeledLatent> ones = {{zs[0], 0, 1}, {zs[1], 0, 1}};
    CHECK(classification_loss(tape, ones, perfect_map)->val[0] ==
          doctest::Approx(0.0).epsilon(1e-9));

    // Random 8-sample fixture against the per-term NLL oracle.
    net::Probe rp = tiny_probe(0, 4, 3, 3);
    ProbeMap rmap;
    rmap[0] = {&rp, rp.bind(tape, true)};
    std::vector<LabeledLatent> fixture;
    std::vector<Tensor> vals;
    for (int i = 0; i < 8; ++i) {
        vals.push_back(Tensor::randn({1, 4}, 1.2, rng));
    }
    for (int i = 0; i < 8; ++i) {
        fixture.push_back({tape.constant(vals[static_cast<std::size_t>(i)]), 0, i % 3});
    }
    Node* rloss = classification_loss(tape, fixture, rmap);
    double want = 0.0;
    const auto w = probe_w(rp);
    const auto b = probe_b(rp);
    for (int i = 0; i < 8; ++i) {
        want += oracles::probe_nll_oracle(vals[static_cast<std::size_t>(i)].data, w, b, i % 3);
    }
    CHECK(rloss->val[0] == doctest::Approx(want).epsilon(1e-6));

    // Missing probe for a labeled aspect is an error.
    std::vector<LabeledLatent> other_aspect = {{zs[0], 1, 0}};
    CHECK_THROWS(classification_loss(tape, other_aspect, rmap));
}

TEST_CASE("aspect gap loss: degenerate cases and hand-computed distance") {
    Tape tape;
    std::vector<Node*> g0 = {tape.constant(row({1.0, 2.0}))};
    CHECK(aspect_gap_loss(tape, {g0})->val[0] == 0.0);

    std::vector<Node*> same_a = {tape.constant(row({1.0, 1.0})),
                                 tape.constant(row({3.0, 3.0}))};
    std::vector<Node*> same_b = {tape.constant(row({2.0, 2.0}))};
    CHECK(aspect_gap_loss(tape, {same_a, same_b})->val[0] == doctest::Approx(0.0));

    std::vector<Node*> a = {tape.constant(row({0.0, 0.0}))};
    std::vector<Node*> b = {tape.constant(row({3.0, 4.0}))};
    CHECK(aspect_gap_loss(tape, {a, b})->val[0] == doctest::Approx(25.0).epsilon(1e-12));

    CHECK_THROWS(aspect_gap_loss(tape, {a, {}}));
}

TEST_CASE("aspect gap loss is invariant under common translation") {
    Rng rng(13);
    Tape tape;
    Tensor shift = Tensor::randn({1, 6}, 2.0, rng);
    std::vector<std::vector<Node*>> plain, shifted;
    for (int g = 0; g < 3; ++g) {
        std::vector<Node*> pg, sg;
        for (int i = 0; i < 4; ++i) {
            Tensor t = Tensor::randn({1, 6}, 1.0, rng);
            pg.push_back(tape.constant(t));
            Tensor t2 = t;
            for (std::size_t j = 0; j < t2.size(); ++j) t2[j] += shift[j];
            sg.push_back(tape.constant(t2));
        }
        plain.push_back(pg);
        shifted.push_back(sg);
    }
    const double v1 = aspect_gap_loss(tape, plain)->val[0];
    const double v2 = aspect_gap_loss(tape, shifted)->val[0];
    CHECK(v1 == doctest::Approx(v2).epsilon(1e-9));
}

TEST_CASE("counterfactual classification: duplication identity and oracle") {
    Tape tape;
    net::Probe probe = tiny_probe(0, 4, 2, 21);
    BoundProbe bp{&probe, probe.bind(tape, true)};

    Rng rng(23);
    std::vector<CfLatentPair> pairs;
    std::vector<LabeledLatent> plain;
    std::vector<Tensor> zs, zbars;
    for (int i = 0; i < 8; ++i) {
        zs.push_back(Tensor::randn({1, 4}, 1.0, rng));
        zbars.push_back(Tensor::randn({1, 4}, 1.0, rng));
    }
    // Zbar == Z: exactly twice the plain per-aspect classification loss.
    for (int i = 0; i < 8; ++i) {
        Node* z = tape.constant(zs[static_cast<std::size_t>(i)]);
        pairs.push_back({z, z, i % 2});
        plain.push_back({z, 0, i % 2});
    }
    ProbeMap pm;
    pm[0] = bp;
    const double twice = classification_loss_cf(tape, pairs, bp)->val[0];
    const double once = classification_loss(tape, plain, pm)->val[0];
    CHECK(twice == doctest::Approx(2.0 * once).epsilon(1e-12));

    // Independent Zbar: term-by-term oracle.
    std::vector<CfLatentPair> mixed;
    for (int i = 0; i < 8; ++i) {
        mixed.push_back({tape.constant(zs[static_cast<std::size_t>(i)]),
                         tape.constant(zbars[static_cast<std::size_t>(i)]), i % 2});
    }
    const auto w = probe_w(probe);
    const auto b = probe_b(probe);
    double want = 0.0;
    for (int i = 0; i < 8; ++i) {
        want += oracles::probe_nll_oracle(zs[static_cast<std::size_t>(i)].data, w, b, i % 2);
        want += oracles::probe_nll_oracle(zbars[static_cast<std::size_t>(i)].data, w, b, i % 2);
    }
    CHECK(classification_loss_cf(tape, mixed, bp)->val[0] ==
          doctest::Approx(want).epsilon(1e-6));

    std::vector<CfLatentPair> missing = {{tape.constant(zs[0]), nullptr, 0}};
    CHECK_THROWS(classification_loss_cf(tape, missing, bp));
}

TEST_CASE("counterfactual aspect gap: averaging identity and 2-d fixture") {
    Tape tape;
    // Zbar == Z reduces to the plain gap terms that involve the aspect.
    Rng rng(31);
    std::vector<CfLatentPair> group;
    std::vector<Node*> plain_group;
    for (int i = 0; i < 5; ++i) {
        Node* z = tape.constant(Tensor::randn({1, 3}, 1.0, rng));
        group.push_back({z, z, 0});
        plain_group.push_back(z);
    }
    std::vector<Node*> other;
    for (int i = 0; i < 4; ++i) {
        other.push_back(tape.constant(Tensor::randn({1, 3}, 1.0, rng)));
    }
    const double cf = aspect_gap_loss_cf(tape, group, {other})->val[0];
    const double plain = aspect_gap_loss(tape, {plain_group, other})->val[0];
    CHECK(cf == doctest::Approx(plain).epsilon(1e-9));

    // Hand-computed: anchors (1,1)/(3,3) with counterfactuals (3,3)/(5,7),
    // other group mean (1,2). mean of (Z+Zbar)/2 = ((2,2)+(4,5))/2 = (3,3.5);
    // squared distance to (1,2) = 4 + 2.25.
    std::vector<CfLatentPair> g2 = {
        {tape.constant(row({1.0, 1.0})), tape.constant(row({3.0, 3.0})), 0},
        {tape.constant(row({3.0, 3.0})), tape.constant(row({5.0, 7.0})), 0}};
    std::vector<Node*> o2 = {tape.constant(row({0.0, 1.0})), tape.constant(row({2.0, 3.0}))};
    CHECK(aspect_gap_loss_cf(tape, g2, {o2})->val[0] ==
          doctest::Approx(6.25).epsilon(1e-9));

    // Equal means cost zero.
    std::vector<CfLatentPair> g3 = {{tape.constant(row({1.0, 2.0})),
                                     tape.constant(row({1.0, 2.0})), 0}};
    std::vector<Node*> o3 = {tape.constant(row({1.0, 2.0}))};
    CHECK(aspect_gap_loss_cf(tape, g3, {o3})->val[0] == doctest::Approx(0.0));
}

TEST_CASE("multitask loss: uniform probes, perfect probes, oracle, aspect mismatch") {
    Tape tape;
    net::Probe pa = tiny_probe(0, 4, 2, 41);
    net::Probe pb = tiny_probe(1, 4, 2, 42);
    for (auto& [n, p] : pa.named_params("a")) p->value.zero();
    for (auto& [n, p] : pb.named_params("b")) p->value.zero();
    ProbeMap probes;
    probes[0] = {&pa, pa.bind(tape, true)};
    probes[1] = {&pb, pb.bind(tape, true)};

    Rng rng(43);
    std::vector<LabeledFactor> factors;
    for (int t = 0; t < 2; ++t) {
        for (int i = 0; i < 2; ++i) {
            factors.push_back({tape.constant(Tensor::randn({1, 4}, 1.0, rng)), t, i});
        }
    }
    CHECK(multitask_loss(tape, factors, probes)->val[0] ==
          doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-12));

    // Oracle on trained-looking random probes.
    net::Probe ra = tiny_probe(0, 4, 2, 44);
    net::Probe rb = tiny_probe(1, 4, 2, 45);
    ProbeMap rmap;
    rmap[0] = {&ra, ra.bind(tape, true)};
    rmap[1] = {&rb, rb.bind(tape, true)};
    std::vector<Tensor> vals;
    std::vector<LabeledFactor> fixture;
    for (int i = 0; i < 8; ++i) {
        vals.push_back(Tensor::randn({1, 4}, 1.0, rng));
    }
    for (int i = 0; i < 8; ++i) {
        fixture.push_back({tape.constant(vals[static_cast<std::size_t>(i)]), i % 2, i % 2});
    }
    double want = 0.0;
    for (int i = 0; i < 8; ++i) {
        auto& probe = (i % 2 == 0) ? ra : rb;
        want += oracles::probe_nll_oracle(vals[static_cast<std::size_t>(i)].data, probe_w(probe),
                                          probe_b(probe), i % 2);
    }
    CHECK(multitask_loss(tape, fixture, rmap)->val[0] == doctest::Approx(want).epsilon(1e-6));

    // A probe registered under the wrong aspect is rejected.
    ProbeMap bad;
    bad[0] = {&rb, rb.bind(tape, true)};  // probe built for aspect 1
    std::vector<LabeledFactor> one = {{tape.constant(vals[0]), 0, 0}};
    CHECK_THROWS(multitask_loss(tape, one, bad));
}

TEST_CASE("intervention reconstruction: self-partner identity and compose oracle") {
    Decoder dec = tiny_decoder(51);
    Rng rng(52);
    net::PrefixMlp mlp(4, 6, dec.prefix_shape(), rng);

    Tape tape;
    auto dbound = dec.bind(tape, true);
    auto mbound = mlp.bind(tape, true);

    const TokenIds text = dec.vocab().encode({"stadium", "gloomy", "news"});
    const Tensor hmu = Tensor::randn({1, 4}, 0.8, rng);
    const Tensor hsig = Tensor::randn({1, 4}, 0.8, rng);

    // Self-partner: equals the plain reconstruction of the sample under
    // Prefix = MLP(h_mu + h_sigma).
    std::vector<InterventionEntry> self = {{tape.constant(hmu), tape.constant(hsig), text, 7, 7,
                                            0, 0, 1, 1}};
    const double got = intervention_reconstruction_loss(tape, dec, dbound, mlp, mbound, self)
                           ->val[0];
    Node* z = tape.add(tape.constant(hmu), tape.constant(hsig));
    Node* prefix = mlp.forward(tape, mbound, z);
    std::vector<Node*> prefixes = {prefix};
    std::vector<TokenIds> texts = {text};
    const double rec = reconstruction_loss(tape, dec, dbound, prefixes, texts)->val[0];
    CHECK(got == doctest::Approx(rec).epsilon(1e-12));

    // Compose-then-logprob oracle: run the MLP by hand, then the brute-force
    // decoder oracle.
    auto params = mlp.named_params();
    const auto w1 = oracles::to_mat(params[0].second->value);
    const auto b1 = oracles::to_mat(params[1].second->value);
    const auto w2 = oracles::to_mat(params[2].second->value);
    const auto b2 = oracles::to_mat(params[3].second->value);
    std::vector<double> zsum(4);
    for (int i = 0; i < 4; ++i) {
        zsum[static_cast<std::size_t>(i)] = hmu[static_cast<std::size_t>(i)] +
                                            hsig[static_cast<std::size_t>(i)];
    }
    std::vector<double> hidden(w1[0].size());
    for (std::size_t j = 0; j < hidden.size(); ++j) {
        double s = b1[0][j];
        for (std::size_t i = 0; i < zsum.size(); ++i) s += zsum[i] * w1[i][j];
        hidden[j] = std::tanh(s);
    }
    Tensor oracle_prefix(dec.prefix_shape().dims());
    for (std::size_t j = 0; j < oracle_prefix.size(); ++j) {
        double s = b2[0][j];
        for (std::size_t i = 0; i < hidden.size(); ++i) s += hidden[i] * w2[i][j];
        oracle_prefix[j] = s;
    }
    const double want = -oracles::decoder_logprob_oracle(dec, oracle_prefix, text);
    CHECK(got == doctest::Approx(want).epsilon(1e-6));

    // Constraint validation: partner with a different implicit attribute, or
    // sharing the explicit attribute, is rejected.
    std::vector<InterventionEntry> bad1 = {{tape.constant(hmu), tape.constant(hsig), text, 7, 8,
                                            0, 1, 1, 0}};
    CHECK_THROWS(intervention_reconstruction_loss(tape, dec, dbound, mlp, mbound, bad1));
    std::vector<InterventionEntry> bad2 = {{tape.constant(hmu), tape.constant(hsig), text, 7, 8,
                                            0, 0, 1, 1}};
    CHECK_THROWS(intervention_reconstruction_loss(tape, dec, dbound, mlp, mbound, bad2));
}

TEST_CASE("intervention distance: hinge fixture, inactive region, monotonicity") {
    Tape tape;
    // d = 1.0, gamma = 0.4 -> 0.6.
    std::vector<DistanceEntry> fixture;
    fixture.push_back({tape.constant(row({1.0, 0.0})), row({0.0, 0.0})});
    CHECK(intervention_distance_loss(tape, fixture, 0.4)->val[0] ==
          doctest::Approx(0.6).epsilon(1e-9));

    // Within the margin the hinge is inactive.
    std::vector<DistanceEntry> inside;
    inside.push_back({tape.constant(row({0.3, 0.0})), row({0.0, 0.0})});
    CHECK(intervention_distance_loss(tape, inside, 0.4)->val[0] == 0.0);

    CHECK_THROWS(intervention_distance_loss(tape, fixture, 0.0));
    CHECK_THROWS(intervention_distance_loss(tape, fixture, -1.0));

    // Monotone non-decreasing in the distance.
    double prev = -1.0;
    for (double d = 0.0; d <= 3.0; d += 0.25) {
        Tape t2;
        std::vector<DistanceEntry> e;
        e.push_back({t2.constant(row({d, 0.0})), row({0.0, 0.0})});
        const double v = intervention_distance_loss(t2, e, 0.4)->val[0];
        CHECK(v >= prev);
        prev = v;
    }
}

TEST_CASE("default weights and margin match the reference configuration") {
    const auto w = default_loss_weights();
    CHECK(w.at("rec") == 0.5);
    CHECK(w.at("cls") == 0.2);
    CHECK(w.at("gap") == 0.3);
    CHECK(w.at("mul") == 0.2);
    CHECK(w.at("r_intv") == 0.5);
    CHECK(w.at("d_intv") == 0.2);
    CHECK(kDefaultGamma == 0.4);
}

TEST_CASE("total loss assembly: zeros, unit components, weight map, errors") {
    const auto w = default_loss_weights();
    const std::map<std::string, double> zeros = {{"rec", 0.0},    {"cls", 0.0},
                                                 {"gap", 0.0},    {"mul", 0.0},
                                                 {"r_intv", 0.0}, {"d_intv", 0.0}};
    CHECK(total_loss(zeros, w).total == 0.0);

    const std::map<std::string, double> ones = {{"rec", 1.0},    {"cls", 1.0},
                                                {"gap", 1.0},    {"mul", 1.0},
                                                {"r_intv", 1.0}, {"d_intv", 1.0}};
    CHECK(total_loss(ones, w).total == doctest::Approx(1.9).epsilon(1e-12));

    // Counterfactual components substitute and reuse the parent weights.
    const std::map<std::string, double> with_cf = {{"rec", 1.0},    {"cls", 0.5},
                                                   {"cls_cf", 2.0}, {"gap_cf", 1.0},
                                                   {"mul", 1.0},    {"r_intv", 1.0},
                                                   {"d_intv", 1.0}};
    const LossBreakdown b = total_loss(with_cf, w);
    CHECK(b.weights.at("cls_cf") == 0.2);
    CHECK(b.weights.at("gap_cf") == 0.3);
    double recon = 0.0;
    for (const auto& [name, weight] : b.weights) {
        recon += weight * with_cf.at(name);
    }
    CHECK(std::abs(b.total - recon) < 1e-9);

    std::map<std::string, double> missing = w;
    missing.erase("gap");
    CHECK_THROWS(total_loss(with_cf, missing));
    CHECK_THROWS(total_loss({{"bogus", 1.0}}, w));
    CHECK_THROWS(total_loss({{"rec", std::nan("")}}, w));
}

TEST_CASE("every loss is non-negative on random fixtures") {
    Rng rng(71);
    for (int trial = 0; trial < 20; ++trial) {
        Tape tape;
        net::Probe probe = tiny_probe(0, 3, 2, 100 + static_cast<std::uint64_t>(trial));
        BoundProbe bp{&probe, probe.bind(tape, true)};
        ProbeMap pm;
        pm[0] = bp;
        std::vector<LabeledLatent> latents;
        std::vector<CfLatentPair> pairs;
        std::vector<std::vector<Node*>> groups(2);
        for (int i = 0; i < 4; ++i) {
            Node* z = tape.constant(Tensor::randn({1, 3}, 1.5, rng));
            Node* zb = tape.constant(Tensor::randn({1, 3}, 1.5, rng));
            latents.push_back({z, 0, static_cast<int>(rng.uniform_int(2))});
            pairs.push_back({z, zb, static_cast<int>(rng.uniform_int(2))});
            groups[static_cast<std::size_t>(i % 2)].push_back(z);
        }
        CHECK(classification_loss(tape, latents, pm)->val[0] >= 0.0);
        CHECK(classification_loss_cf(tape, pairs, bp)->val[0] >= 0.0);
        CHECK(aspect_gap_loss(tape, groups)->val[0] >= 0.0);
        CHECK(aspect_gap_loss_cf(tape, pairs, {groups[1]})->val[0] >= 0.0);
        std::vector<DistanceEntry> des;
        des.push_back({pairs[0].z_cf, Tensor::randn({1, 3}, 1.0, rng)});
        CHECK(intervention_distance_loss(tape, des, 0.4)->val[0] >= 0.0);
    }
}

TEST_CASE("gradients of every loss match finite differences") {
    Decoder dec = tiny_decoder(81);
    Rng rng(82);
    net::PrefixMlp mlp(4, 6, dec.prefix_shape(), rng);
    net::Probe probe0 = tiny_probe(0, 4, 2, 83);
    net::Probe probe1 = tiny_probe(1, 4, 2, 84);

    Param z1("z1", Tensor::randn({1, 4}, 0.9, rng));
    Param z2("z2", Tensor::randn({1, 4}, 0.9, rng));
    Param zb1("zb1", Tensor::randn({1, 4}, 0.9, rng));
    Param zb2("zb2", Tensor::randn({1, 4}, 0.9, rng));
    Param hmu("hmu", Tensor::randn({1, 4}, 0.9, rng));
    Param hsig("hsig", Tensor::randn({1, 4}, 0.9, rng));
    Param pfx("pfx", Tensor::randn({1, dec.prefix_shape().flat()}, 0.4, rng));
    const Tensor centroid = Tensor::randn({1, 4}, 2.0, rng);  // far: hinge active
    const TokenIds text = dec.vocab().encode({"match", "bleak"});

    std::vector<Param*> all = {&z1, &z2, &zb1, &zb2, &hmu, &hsig, &pfx};
    auto probe_params = [&](net::Probe& p, const char* tag) {
        auto np = p.named_params(tag);
        return std::vector<Param*>{np[0].second, np[1].second};
    };
    for (Param* p : probe_params(probe0, "p0")) all.push_back(p);
    for (Param* p : probe_params(probe1, "p1")) all.push_back(p);
    for (auto& [n, p] : mlp.named_params()) all.push_back(p);

    auto forward = [&](bool want) -> double {
        Tape tape;
        auto dbound = dec.bind(tape, true);
        auto mbound = mlp.bind(tape, false);
        ProbeMap pm;
        pm[0] = {&probe0, probe0.bind(tape, false)};
        pm[1] = {&probe1, probe1.bind(tape, false)};

        Node* nz1 = tape.param(z1);
        Node* nz2 = tape.param(z2);
        Node* nzb1 = tape.param(zb1);
        Node* nzb2 = tape.param(zb2);
        Node* nhmu = tape.param(hmu);
        Node* nhsig = tape.param(hsig);
        Node* npfx = tape.param(pfx);

        std::vector<Node*> prefixes = {npfx};
        std::vector<TokenIds> texts = {text};
        Node* rec = reconstruction_loss(tape, dec, dbound, prefixes, texts);

        std::vector<LabeledLatent> latents = {{nz1, 0, 0}, {nz2, 1, 1}};
        Node* cls = classification_loss(tape, latents, pm);

        Node* gap = aspect_gap_loss(tape, {{nz1, nzb1}, {nz2, nzb2}});

        std::vector<CfLatentPair> pairs = {{nz1, nzb1, 0}, {nz2, nzb2, 1}};
        Node* cls_cf = classification_loss_cf(tape, pairs, pm[0]);
        Node* gap_cf = aspect_gap_loss_cf(tape, pairs, {{nz2, nzb2}});

        std::vector<LabeledFactor> factors = {{nhmu, 0, 0}, {nhsig, 1, 1}};
        Node* mul = multitask_loss(tape, factors, pm);

        std::vector<InterventionEntry> ie = {{nhmu, nhsig, text, 1, 2, 0, 1, 1, 1}};
        Node* r_intv = intervention_reconstruction_loss(tape, dec, dbound, mlp, mbound, ie);

        std::vector<DistanceEntry> de = {{nzb1, centroid}, {nzb2, centroid}};
        Node* d_intv = intervention_distance_loss(tape, de, 0.4);

        Node* total = weighted_total(tape,
                                     {{"rec", rec},
                                      {"cls", cls},
                                      {"gap", gap},
                                      {"cls_cf", cls_cf},
                                      {"gap_cf", gap_cf},
                                      {"mul", mul},
                                      {"r_intv", r_intv},
                                      {"d_intv", d_intv}},
                                     default_loss_weights());
        if (want) {
            tape.backward(total);
            tape.harvest();
        }
        return total->val[0];
    };

    for (Param* p : all) p->zero_grad();
    forward(true);
    std::vector<Tensor*> tensors;
    std::vector<const Tensor*> grads;
    for (Param* p : all) {
        tensors.push_back(&p->value);
        grads.push_back(&p->grad);
    }
    const auto res = mcg::testutil::finite_diff_check([&] { return forward(false); },
                                                      tensors, grads);
    INFO(res.worst);
    CHECK(res.checked > 100);
    CHECK(res.max_rel_err < 1e-4);
}

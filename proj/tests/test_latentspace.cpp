#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "mcg/latentspace.hpp"

using namespace mcg;
using namespace mcg::space;
using corpus::Sample;
using nn::Tensor;

namespace {

net::ModelConfig tiny_config() {
    net::ModelConfig c;
    c.d_h = 8;
    c.disent_hidden = 12;
    c.prefix_hidden = 16;
    c.encoder = {8, 2, 1, 16, 24};
    c.decoder = {12, 2, 1, 24, 32, 2};
    return c;
}

struct Fixture {
    corpus::CorpusFile file;
    net::Model model;

    explicit Fixture(int per_attr = 10, std::uint64_t seed = 3)
        : file(), model() {
        file.schema = corpus::desk_schema();
        file.vocab = corpus::Vocabulary::from_schema(file.schema);
        file.samples = corpus::build_synthetic_corpus(file.schema, per_attr, {0.7, 0.3}, seed);
        file.per_attr_count = per_attr;
        file.ratio = {0.7, 0.3};
        file.seed = seed;
        model = net::Model(tiny_config(), file.schema, file.vocab, seed + 1);
    }
};

// Random store over a toy 2-aspect schema-like label layout.
AttributeSpace random_store(int rows_per_attr, int dim, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> data;
    std::vector<RowLabel> labels;
    int id = 0;
    for (int aspect = 0; aspect < 2; ++aspect) {
        for (int attr = 0; attr < 2; ++attr) {
            for (int i = 0; i < rows_per_attr; ++i) {
                for (int d = 0; d < dim; ++d) {
                    data.push_back(rng.gauss());
                }
                labels.push_back({id++, aspect, attr, {}, false});
            }
        }
    }
    return AttributeSpace::from_rows(dim, std::move(data), std::move(labels), "testhash");
}

// Independent re-implementation of the iterative intersection retrieval.
std::vector<int> retrieval_oracle(const AttributeSpace& space, const TargetSpec& target,
                                  std::size_t want_index) {
    struct Ent {
        std::vector<int> set;
        std::vector<int> sel;
        int k;
    };
    std::vector<Ent> ents;
    for (const auto& a : target.attrs) {
        Ent e;
        e.set = space.attr_rows(a.aspect, a.attr);
        e.k = std::min<int>(target.k, static_cast<int>(e.set.size()));
        e.sel = e.set;
        ents.push_back(e);
    }
    const int dim = space.dim();
    for (int iter = 0; iter < 10; ++iter) {
        std::vector<std::vector<double>> reps;
        for (const Ent& e : ents) {
            std::vector<double> r(static_cast<std::size_t>(dim), 0.0);
            for (int row : e.sel) {
                for (int d = 0; d < dim; ++d) {
                    r[static_cast<std::size_t>(d)] += space.row(row)[d];
                }
            }
            for (double& v : r) v /= static_cast<double>(e.sel.size());
            reps.push_back(std::move(r));
        }
        bool changed = false;
        for (std::size_t e = 0; e < ents.size(); ++e) {
            // Exhaustive scan: score every row of the set, pick K best with
            // lower-index tie-break, via stable selection over (score, index).
            std::vector<std::pair<double, int>> scored;
            for (int row : ents[e].set) {
                double s = 0.0;
                for (std::size_t o = 0; o < ents.size(); ++o) {
                    if (o == e) continue;
                    double acc = 0.0;
                    for (int d = 0; d < dim; ++d) {
                        const double diff = space.row(row)[d] - reps[o][static_cast<std::size_t>(d)];
                        acc += diff * diff;
                    }
                    s += std::sqrt(acc);
                }
                scored.emplace_back(s, row);
            }
            std::sort(scored.begin(), scored.end());
            std::vector<int> sel;
            for (int i = 0; i < ents[e].k; ++i) {
                sel.push_back(scored[static_cast<std::size_t>(i)].second);
            }
            std::sort(sel.begin(), sel.end());
            if (sel != ents[e].sel) {
                ents[e].sel = sel;
                changed = true;
            }
        }
        if (!changed) break;
    }
    return ents[want_index].sel;
}

}  // namespace

TEST_CASE("target spec parsing and validation") {
    const auto schema = corpus::desk_schema();
    const TargetSpec t = TargetSpec::parse("topic=sport,sentiment=positive", schema, 5);
    REQUIRE(t.attrs.size() == 2);
    CHECK(t.attrs[0].aspect == 0);
    CHECK(t.attrs[0].attr == 0);
    CHECK(t.attrs[1].aspect == 1);
    CHECK(t.attrs[1].attr == 1);
    CHECK(t.k == 5);
    CHECK(t.describe(schema) == "topic=sport,sentiment=positive");

    const TargetSpec weighted = TargetSpec::parse("topic=world:2.5", schema);
    CHECK(weighted.attrs[0].weight == 2.5);

    CHECK_THROWS(TargetSpec::parse("topic=sport,topic=world", schema));
    CHECK_THROWS(TargetSpec::parse("flavor=sweet", schema));
    CHECK_THROWS(TargetSpec::parse("topic=hockey", schema));
    TargetSpec bad = t;
    bad.k = 0;
    CHECK_THROWS(bad.validate(schema));
}

TEST_CASE("build_space without counterfactuals has one row per sample") {
    Fixture fx(5, 7);
    const AttributeSpace s = build_space(fx.model, fx.file, false, "ckptd", "cfgd");
    CHECK(s.rows() == static_cast<int>(fx.file.samples.size()));
    CHECK(s.synthetic_rows() == 0);
    CHECK(s.dim() == 8);
    CHECK(s.schema_hash() == fx.file.schema.hash());
    CHECK(s.checkpoint_digest() == "ckptd");

    // Row labels mirror the samples, and each row equals the encoded latent.
    const Sample& first = fx.file.samples.front();
    const auto f = fx.model.disentangle(fx.model.encode(first.text));
    for (int d = 0; d < 8; ++d) {
        CHECK(s.row(0)[d] == f.z[static_cast<std::size_t>(d)]);
    }
}

TEST_CASE("counterfactual rows bring every cell pair to parity") {
    Fixture fx(10, 11);  // cells 7/3 per topic
    const AttributeSpace s = build_space(fx.model, fx.file, true, "ckptd");
    // 4 synthetic rows per topic attribute.
    CHECK(s.synthetic_rows() == 8);
    CHECK(s.rows() == static_cast<int>(fx.file.samples.size()) + 8);

    for (int a = 0; a < 2; ++a) {
        std::array<int, 2> cell_counts = {0, 0};
        for (int i = 0; i < s.rows(); ++i) {
            const RowLabel& l = s.label(i);
            if (l.explicit_aspect == 0 && l.explicit_attr == a) {
                ++cell_counts[static_cast<std::size_t>(l.implicit_attrs.at(1))];
            }
        }
        CHECK(cell_counts[0] == 7);
        CHECK(cell_counts[1] == 7);
    }

    // Synthetic rows carry the minority implicit label and an anchor source.
    for (int i = 0; i < s.rows(); ++i) {
        const RowLabel& l = s.label(i);
        if (!l.synthetic) continue;
        CHECK(l.implicit_attrs.at(1) == 1);  // positive minority
        CHECK(l.source_id >= 0);
    }
}

TEST_CASE("rebuilding the space yields an identical digest") {
    Fixture fx(10, 13);
    const AttributeSpace a = build_space(fx.model, fx.file, true, "ck");
    const AttributeSpace b = build_space(fx.model, fx.file, true, "ck");
    CHECK(a.digest() == b.digest());
    CHECK(a == b);
}

TEST_CASE("schema mismatch between checkpoint and corpus is rejected") {
    Fixture fx(5, 17);
    corpus::AttributeSchema other = corpus::desk_schema();
    other.aspects[0].attributes[0].name = "hockey";
    net::Model m(tiny_config(), other, corpus::Vocabulary::from_schema(other), 1);
    CHECK_THROWS(build_space(m, fx.file, false, "x"));
}

TEST_CASE("single-aspect target returns the K lowest-index rows") {
    const AttributeSpace s = random_store(10, 4, 23);
    TargetSpec t;
    t.attrs = {{0, 1, 1.0}};
    t.k = 3;
    const auto sel = intersection_topk(s, t, t.attrs[0]);
    const auto& set = s.attr_rows(0, 1);
    CHECK(sel == std::vector<int>(set.begin(), set.begin() + 3));
}

TEST_CASE("K equal to the set size returns the whole set; larger K clips") {
    const AttributeSpace s = random_store(6, 3, 29);
    TargetSpec t;
    t.attrs = {{0, 0, 1.0}, {1, 1, 1.0}};
    t.k = 6;
    CHECK(intersection_topk(s, t, t.attrs[0]) == s.attr_rows(0, 0));
    t.k = 50;
    CHECK(intersection_topk(s, t, t.attrs[0]) == s.attr_rows(0, 0));
}

TEST_CASE("retrieval equals the exhaustive oracle across random stores") {
    for (std::uint64_t seed = 1; seed <= 25; ++seed) {
        Rng meta(seed * 1000);
        const int rows_per_attr = 5 + static_cast<int>(meta.uniform_int(45));
        const int dim = 2 + static_cast<int>(meta.uniform_int(31));
        const AttributeSpace s = random_store(rows_per_attr, dim, seed);
        TargetSpec t;
        t.attrs = {{0, static_cast<int>(meta.uniform_int(2)), 1.0},
                   {1, static_cast<int>(meta.uniform_int(2)), 1.0}};
        t.k = 1 + static_cast<int>(meta.uniform_int(static_cast<std::uint64_t>(rows_per_attr)));
        for (std::size_t idx = 0; idx < t.attrs.size(); ++idx) {
            CHECK(intersection_topk(s, t, t.attrs[idx]) == retrieval_oracle(s, t, idx));
        }
    }
}

TEST_CASE("retrieval is invariant under row permutation up to source ids") {
    const AttributeSpace s = random_store(12, 5, 31);
    TargetSpec t;
    t.attrs = {{0, 0, 1.0}, {1, 0, 1.0}};
    t.k = 4;
    const auto sel = intersection_topk(s, t, t.attrs[0]);
    std::set<int> source_ids;
    for (int row : sel) source_ids.insert(s.label(row).source_id);

    // Rebuild the store with rows in reverse order.
    std::vector<double> data;
    std::vector<RowLabel> labels;
    for (int i = s.rows() - 1; i >= 0; --i) {
        data.insert(data.end(), s.row(i), s.row(i) + s.dim());
        labels.push_back(s.label(i));
    }
    const AttributeSpace rev =
        AttributeSpace::from_rows(s.dim(), std::move(data), std::move(labels), "testhash");
    const auto sel2 = intersection_topk(rev, t, t.attrs[0]);
    std::set<int> source_ids2;
    for (int row : sel2) source_ids2.insert(rev.label(row).source_id);
    CHECK(source_ids == source_ids2);
}

TEST_CASE("target vector: single row identity, weighted sum, linearity") {
    const AttributeSpace s = random_store(4, 3, 37);
    TargetSpec single;
    single.attrs = {{0, 0, 1.0}};
    single.k = 1;
    const Tensor z = target_vector(s, single);
    const int row = intersection_topk(s, single, single.attrs[0])[0];
    for (int d = 0; d < 3; ++d) {
        CHECK(z[static_cast<std::size_t>(d)] == doctest::Approx(s.row(row)[d]).epsilon(1e-12));
    }

    // Known 2-d fixture: means (1,1) and (3,5), weights 1.5 and 2.0.
    std::vector<double> data = {0.0, 0.0, 2.0, 2.0,   // aspect 0 attr 0
                                2.0, 4.0, 4.0, 6.0};  // aspect 1 attr 0
    std::vector<RowLabel> labels = {{0, 0, 0, {}, false},
                                    {1, 0, 0, {}, false},
                                    {2, 1, 0, {}, false},
                                    {3, 1, 0, {}, false}};
    const AttributeSpace fixture =
        AttributeSpace::from_rows(2, std::move(data), std::move(labels), "h");
    TargetSpec two;
    two.attrs = {{0, 0, 1.5}, {1, 0, 2.0}};
    two.k = 2;
    const Tensor got = target_vector(fixture, two);
    CHECK(got[0] == doctest::Approx(1.5 * 1.0 + 2.0 * 3.0).epsilon(1e-12));
    CHECK(got[1] == doctest::Approx(1.5 * 1.0 + 2.0 * 5.0).epsilon(1e-12));

    // Scaling all weights scales the output.
    TargetSpec scaled = two;
    scaled.attrs[0].weight *= 3.0;
    scaled.attrs[1].weight *= 3.0;
    const Tensor z3 = target_vector(fixture, scaled);
    CHECK(z3[0] == doctest::Approx(3.0 * got[0]).epsilon(1e-12));
    CHECK(z3[1] == doctest::Approx(3.0 * got[1]).epsilon(1e-12));
}

TEST_CASE("space files round-trip; truncation is detected; flags survive") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "mcg_space_test.bin";

    Fixture fx(10, 41);
    const AttributeSpace s = build_space(fx.model, fx.file, true, "ckptd", "cfgd");
    save_space(s, path);
    const AttributeSpace back = load_space(path);
    CHECK(back == s);
    CHECK(back.digest() == s.digest());
    CHECK(back.synthetic_rows() == s.synthetic_rows());
    CHECK(back.run_config_digest() == "cfgd");

    // Field-by-field label comparison, synthetic flags included.
    for (int i = 0; i < s.rows(); ++i) {
        CHECK(back.label(i) == s.label(i));
    }

    const std::string blob = read_text_file(path);
    write_text_file(path, blob.substr(0, blob.size() - 9));
    CHECK_THROWS(load_space(path));
    fs::remove(path);
}

TEST_CASE("balance_cells equalizes real rows and drops synthetic ones") {
    Fixture fx(10, 43);
    const AttributeSpace s = build_space(fx.model, fx.file, true, "ck");
    const AttributeSpace b = balance_cells(s, 7);
    CHECK(b.synthetic_rows() == 0);
    for (int a = 0; a < 2; ++a) {
        std::array<int, 2> counts = {0, 0};
        for (int i = 0; i < b.rows(); ++i) {
            const RowLabel& l = b.label(i);
            if (l.explicit_aspect == 0 && l.explicit_attr == a) {
                ++counts[static_cast<std::size_t>(l.implicit_attrs.at(1))];
            }
        }
        CHECK(counts[0] == 3);  // downsampled majority
        CHECK(counts[1] == 3);  // minority kept
    }
    // Unannotated rows (the sentiment-explicit source) survive unchanged.
    int sentiment_rows = 0;
    for (int i = 0; i < b.rows(); ++i) {
        if (b.label(i).explicit_aspect == 1) ++sentiment_rows;
    }
    CHECK(sentiment_rows == 20);
}

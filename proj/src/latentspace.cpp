#include "mcg/latentspace.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <fstream>
#include <sstream>

namespace mcg::space {

using corpus::Sample;
using nn::Tensor;

namespace {

void check(bool ok, const std::string& msg) {
    if (!ok) {
        throw std::invalid_argument(msg);
    }
}

const std::vector<int> kEmpty;

double euclidean(const double* a, const double* b, int dim) {
    double s = 0.0;
    for (int i = 0; i < dim; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

// Shared fixed-point retrieval: selections for every target attribute.
std::map<std::pair<int, int>, std::vector<int>> retrieve_all(const AttributeSpace& space,
                                                             const TargetSpec& target) {
    check(!target.attrs.empty(), "retrieval: empty target");
    const int dim = space.dim();

    struct Entry {
        TargetAttr attr;
        const std::vector<int>* set;
        int k;
        std::vector<int> selection;
    };
    std::vector<Entry> entries;
    for (const TargetAttr& a : target.attrs) {
        const auto& set = space.attr_rows(a.aspect, a.attr);
        if (set.empty()) {
            throw std::runtime_error("retrieval: empty row set for a target attribute");
        }
        const int k = std::min(target.k, static_cast<int>(set.size()));
        entries.push_back({a, &set, k, *&set});  // initial representatives: the full set
    }

    std::vector<double> rep(static_cast<std::size_t>(entries.size()) * dim);
    for (int iter = 0; iter < 10; ++iter) {
        // Representatives from the current selections.
        for (std::size_t e = 0; e < entries.size(); ++e) {
            double* r = rep.data() + e * static_cast<std::size_t>(dim);
            std::fill(r, r + dim, 0.0);
            for (int row : entries[e].selection) {
                const double* x = space.row(row);
                for (int i = 0; i < dim; ++i) {
                    r[i] += x[i];
                }
            }
            for (int i = 0; i < dim; ++i) {
                r[i] /= static_cast<double>(entries[e].selection.size());
            }
        }
        bool changed = false;
        for (std::size_t e = 0; e < entries.size(); ++e) {
            Entry& en = entries[e];
            std::vector<std::pair<double, int>> scored;
            scored.reserve(en.set->size());
            for (int row : *en.set) {
                double score = 0.0;
                for (std::size_t o = 0; o < entries.size(); ++o) {
                    if (o == e) {
                        continue;
                    }
                    score += euclidean(space.row(row),
                                       rep.data() + o * static_cast<std::size_t>(dim), dim);
                }
                scored.emplace_back(score, row);
            }
            std::sort(scored.begin(), scored.end());  // ties: lower row index first
            std::vector<int> sel;
            sel.reserve(static_cast<std::size_t>(en.k));
            for (int i = 0; i < en.k; ++i) {
                sel.push_back(scored[static_cast<std::size_t>(i)].second);
            }
            std::sort(sel.begin(), sel.end());
            if (sel != en.selection) {
                changed = true;
                en.selection = std::move(sel);
            }
        }
        if (!changed) {
            break;
        }
    }

    std::map<std::pair<int, int>, std::vector<int>> out;
    for (Entry& e : entries) {
        out[{e.attr.aspect, e.attr.attr}] = std::move(e.selection);
    }
    return out;
}

}  // namespace

// ----------------------------------------------------------------------------
// TargetSpec.

void TargetSpec::validate(const corpus::AttributeSchema& schema) const {
    check(!attrs.empty(), "target: at least one attribute required");
    check(k >= 1, "target: retrieval size must be >= 1");
    std::set<int> seen;
    for (const TargetAttr& a : attrs) {
        check(a.aspect >= 0 && a.aspect < schema.n_aspects(), "target: unknown aspect");
        check(a.attr >= 0 && a.attr < schema.n_attrs(a.aspect), "target: unknown attribute");
        check(a.weight > 0.0, "target: weights must be positive");
        check(seen.insert(a.aspect).second, "target: more than one attribute for an aspect");
    }
}

TargetSpec TargetSpec::parse(const std::string& text, const corpus::AttributeSchema& schema,
                             int k) {
    TargetSpec spec;
    spec.k = k;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) {
            continue;
        }
        const auto eq = item.find('=');
        check(eq != std::string::npos, "target: expected aspect=attribute, got '" + item + "'");
        const std::string aspect = item.substr(0, eq);
        std::string attr = item.substr(eq + 1);
        double weight = 1.0;
        const auto colon = attr.find(':');
        if (colon != std::string::npos) {
            weight = std::stod(attr.substr(colon + 1));
            attr = attr.substr(0, colon);
        }
        const int t = schema.aspect_index(aspect);
        check(t >= 0, "target: unknown aspect '" + aspect + "'");
        const int a = schema.attr_index(t, attr);
        check(a >= 0, "target: unknown attribute '" + attr + "'");
        spec.attrs.push_back({t, a, weight});
    }
    spec.validate(schema);
    return spec;
}

std::string TargetSpec::describe(const corpus::AttributeSchema& schema) const {
    std::string out;
    for (std::size_t i = 0; i < attrs.size(); ++i) {
        if (i) {
            out += ",";
        }
        out += schema.aspect(attrs[i].aspect).name + "=" +
               schema.aspect(attrs[i].aspect)
                   .attributes[static_cast<std::size_t>(attrs[i].attr)]
                   .name;
    }
    return out;
}

// ----------------------------------------------------------------------------
// AttributeSpace.

AttributeSpace AttributeSpace::from_rows(int dim, std::vector<double> data,
                                         std::vector<RowLabel> labels, std::string schema_hash,
                                         std::string checkpoint_digest,
                                         std::string run_config_digest) {
    check(dim > 0, "attribute space: dimension must be positive");
    check(data.size() == labels.size() * static_cast<std::size_t>(dim),
          "attribute space: data/label size mismatch");
    AttributeSpace s;
    s.dim_ = dim;
    s.data_ = std::move(data);
    s.labels_ = std::move(labels);
    s.schema_hash_ = std::move(schema_hash);
    s.checkpoint_digest_ = std::move(checkpoint_digest);
    s.run_config_digest_ = std::move(run_config_digest);
    s.rebuild_index();
    return s;
}

void AttributeSpace::rebuild_index() {
    by_attr_.clear();
    for (std::size_t i = 0; i < labels_.size(); ++i) {
        by_attr_[{labels_[i].explicit_aspect, labels_[i].explicit_attr}].push_back(
            static_cast<int>(i));
    }
}

const std::vector<int>& AttributeSpace::attr_rows(int aspect, int attr) const {
    auto it = by_attr_.find({aspect, attr});
    return it == by_attr_.end() ? kEmpty : it->second;
}

int AttributeSpace::synthetic_rows() const {
    int n = 0;
    for (const RowLabel& l : labels_) {
        n += l.synthetic ? 1 : 0;
    }
    return n;
}

std::uint64_t AttributeSpace::digest() const {
    std::uint64_t h = kFnvOffset;
    h = fnv1a(&dim_, sizeof(dim_), h);
    h = fnv1a(data_, h);
    for (const RowLabel& l : labels_) {
        h = fnv1a(&l.source_id, sizeof(l.source_id), h);
        h = fnv1a(&l.explicit_aspect, sizeof(l.explicit_aspect), h);
        h = fnv1a(&l.explicit_attr, sizeof(l.explicit_attr), h);
        for (const auto& [k, v] : l.implicit_attrs) {
            h = fnv1a(&k, sizeof(k), h);
            h = fnv1a(&v, sizeof(v), h);
        }
        const char f = l.synthetic ? 1 : 0;
        h = fnv1a(&f, 1, h);
    }
    h = fnv1a(schema_hash_, h);
    return h;
}

// ----------------------------------------------------------------------------
// Building.

AttributeSpace build_space(const net::Model& model, const corpus::CorpusFile& corpus_file,
                           bool include_counterfactuals, const std::string& checkpoint_digest,
                           const std::string& run_config_digest) {
    check(model.schema().hash() == corpus_file.schema.hash(),
          "build_space: checkpoint/corpus schema mismatch");
    const int dim = model.config().d_h;
    const int s = corpus_file.schema.implicit_aspect();

    std::vector<const Sample*> ordered;
    for (const Sample& smp : corpus_file.samples) {
        ordered.push_back(&smp);
    }
    std::sort(ordered.begin(), ordered.end(),
              [](const Sample* a, const Sample* b) { return a->id < b->id; });

    std::vector<double> data;
    std::vector<RowLabel> labels;
    data.reserve(ordered.size() * static_cast<std::size_t>(dim));

    // Factors cached for counterfactual pairing.
    std::map<int, net::Model::FactorsValue> factors;
    for (const Sample* smp : ordered) {
        const Tensor h = model.encode(smp->text);
        auto f = model.disentangle(h);
        data.insert(data.end(), f.z.data.begin(), f.z.data.end());
        labels.push_back({smp->id, smp->explicit_aspect, smp->explicit_attr,
                          smp->implicit_attrs, false});
        factors.emplace(smp->id, std::move(f));
    }

    if (include_counterfactuals && s >= 0) {
        const corpus::IndexSets index = corpus::index_corpus(corpus_file.samples);
        Rng rng = seeded_rng(corpus_file.seed, "space-pairing");
        // Partner pools per implicit attribute.
        std::map<int, std::vector<int>> partners_by_implicit;
        for (const Sample* smp : ordered) {
            auto it = smp->implicit_attrs.find(s);
            if (it != smp->implicit_attrs.end()) {
                partners_by_implicit[it->second].push_back(smp->id);
            }
        }
        for (int t = 0; t < corpus_file.schema.n_aspects(); ++t) {
            if (t == s) {
                continue;
            }
            for (int a = 0; a < corpus_file.schema.n_attrs(t); ++a) {
                const auto& cell0 = index.cell(t, a, s, 0);
                const auto& cell1 = index.cell(t, a, s, 1);
                if (cell0.empty() && cell1.empty()) {
                    continue;  // unannotated aspect
                }
                const bool zero_minor = cell0.size() < cell1.size();
                const auto& minor = zero_minor ? cell0 : cell1;
                const auto& major = zero_minor ? cell1 : cell0;
                const int minority_attr = zero_minor ? 0 : 1;
                const int deficit = static_cast<int>(major.size() - minor.size());
                const auto& pool = partners_by_implicit[minority_attr];
                for (int n = 0; n < deficit; ++n) {
                    const int anchor_id = major[rng.uniform_index(major.size())];
                    const int partner_id = pool[rng.uniform_index(pool.size())];
                    const auto& fa = factors.at(anchor_id);
                    const auto& fp = factors.at(partner_id);
                    Tensor z = fa.h_explicit;
                    for (std::size_t i = 0; i < z.size(); ++i) {
                        z[i] += fp.h_implicit[i];
                    }
                    data.insert(data.end(), z.data.begin(), z.data.end());
                    labels.push_back({anchor_id, t, a, {{s, minority_attr}}, true});
                }
            }
        }
    }

    return AttributeSpace::from_rows(dim, std::move(data), std::move(labels),
                                     corpus_file.schema.hash(), checkpoint_digest,
                                     run_config_digest);
}

AttributeSpace balance_cells(const AttributeSpace& space, std::uint64_t seed) {
    // Group real rows per (explicit aspect, attr, implicit aspect, attr).
    std::map<std::array<int, 4>, std::vector<int>> cells;
    std::vector<int> keep;
    for (int i = 0; i < space.rows(); ++i) {
        const RowLabel& l = space.label(i);
        if (l.synthetic) {
            continue;
        }
        if (l.implicit_attrs.empty()) {
            keep.push_back(i);
            continue;
        }
        for (const auto& [k, b] : l.implicit_attrs) {
            cells[{l.explicit_aspect, l.explicit_attr, k, b}].push_back(i);
        }
    }
    Rng rng = seeded_rng(seed, "space-balance");
    std::map<std::array<int, 3>, std::size_t> min_per_attr;
    for (const auto& [key, rows] : cells) {
        const std::array<int, 3> group = {key[0], key[1], key[2]};
        auto it = min_per_attr.find(group);
        if (it == min_per_attr.end() || rows.size() < it->second) {
            min_per_attr[group] = rows.size();
        }
    }
    for (auto& [key, rows] : cells) {
        const std::array<int, 3> group = {key[0], key[1], key[2]};
        std::vector<int> chosen = rows;
        rng.shuffle(chosen);
        chosen.resize(min_per_attr.at(group));
        std::sort(chosen.begin(), chosen.end());
        keep.insert(keep.end(), chosen.begin(), chosen.end());
    }
    std::sort(keep.begin(), keep.end());

    std::vector<double> data;
    std::vector<RowLabel> labels;
    for (int i : keep) {
        const double* r = space.row(i);
        data.insert(data.end(), r, r + space.dim());
        labels.push_back(space.label(i));
    }
    return AttributeSpace::from_rows(space.dim(), std::move(data), std::move(labels),
                                     space.schema_hash(), space.checkpoint_digest(),
                                     space.run_config_digest());
}

// ----------------------------------------------------------------------------
// Retrieval.

std::vector<int> intersection_topk(const AttributeSpace& space, const TargetSpec& target,
                                   const TargetAttr& attr) {
    bool found = false;
    for (const TargetAttr& a : target.attrs) {
        found = found || (a.aspect == attr.aspect && a.attr == attr.attr);
    }
    check(found, "intersection_topk: attribute is not part of the target");
    auto all = retrieve_all(space, target);
    return all.at({attr.aspect, attr.attr});
}

Tensor target_vector(const AttributeSpace& space, const TargetSpec& target) {
    auto all = retrieve_all(space, target);
    Tensor out({1, space.dim()});
    for (const TargetAttr& a : target.attrs) {
        const auto& sel = all.at({a.aspect, a.attr});
        std::vector<double> mean(static_cast<std::size_t>(space.dim()), 0.0);
        for (int row : sel) {
            const double* x = space.row(row);
            for (int i = 0; i < space.dim(); ++i) {
                mean[static_cast<std::size_t>(i)] += x[i];
            }
        }
        for (int i = 0; i < space.dim(); ++i) {
            out[static_cast<std::size_t>(i)] +=
                a.weight * mean[static_cast<std::size_t>(i)] / static_cast<double>(sel.size());
        }
    }
    return out;
}

// ----------------------------------------------------------------------------
// Serialization.

namespace {
constexpr char kMagic[] = "MCGSPACE\x01\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

void append_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

std::uint64_t read_u64(const std::string& in, std::size_t off) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + i])) << (8 * i);
    }
    return v;
}
}  // namespace

void save_space(const AttributeSpace& space, const std::filesystem::path& path) {
    nlohmann::json header;
    header["dim"] = space.dim();
    header["rows"] = space.rows();
    header["schema_hash"] = space.schema_hash();
    header["checkpoint_digest"] = space.checkpoint_digest();
    header["run_config_digest"] = space.run_config_digest();
    nlohmann::json labels = nlohmann::json::array();
    for (const RowLabel& l : space.labels()) {
        nlohmann::json imp = nlohmann::json::object();
        for (const auto& [k, v] : l.implicit_attrs) {
            imp[std::to_string(k)] = v;
        }
        labels.push_back({{"source_id", l.source_id},
                          {"ea", l.explicit_aspect},
                          {"xa", l.explicit_attr},
                          {"implicit", imp},
                          {"synthetic", l.synthetic}});
    }
    header["labels"] = std::move(labels);

    std::string out(kMagic, kMagicLen);
    const std::string hdr = header.dump();
    append_u64(out, hdr.size());
    out += hdr;
    out.append(reinterpret_cast<const char*>(space.raw().data()),
               space.raw().size() * sizeof(double));
    append_u64(out, fnv1a(out.data(), out.size()));
    write_text_file(path, out);
}

AttributeSpace load_space(const std::filesystem::path& path) {
    const std::string in = read_text_file(path);
    if (in.size() < kMagicLen + 16 || std::memcmp(in.data(), kMagic, kMagicLen) != 0) {
        throw std::runtime_error("space file: bad magic or truncated header");
    }
    const std::uint64_t stored = read_u64(in, in.size() - 8);
    if (fnv1a(in.data(), in.size() - 8) != stored) {
        throw std::runtime_error("space file: digest mismatch (corrupt or truncated)");
    }
    const std::uint64_t hdr_len = read_u64(in, kMagicLen);
    const std::size_t hdr_off = kMagicLen + 8;
    const nlohmann::json header = nlohmann::json::parse(in.substr(hdr_off, hdr_len));
    const int dim = header.at("dim").get<int>();
    const int rows = header.at("rows").get<int>();

    std::vector<RowLabel> labels;
    for (const auto& jl : header.at("labels")) {
        RowLabel l;
        l.source_id = jl.at("source_id").get<int>();
        l.explicit_aspect = jl.at("ea").get<int>();
        l.explicit_attr = jl.at("xa").get<int>();
        for (const auto& [k, v] : jl.at("implicit").items()) {
            l.implicit_attrs[std::stoi(k)] = v.get<int>();
        }
        l.synthetic = jl.at("synthetic").get<bool>();
        labels.push_back(std::move(l));
    }
    if (static_cast<int>(labels.size()) != rows) {
        throw std::runtime_error("space file: label count mismatch");
    }
    const std::size_t data_off = hdr_off + hdr_len;
    const std::size_t data_bytes = static_cast<std::size_t>(rows) * dim * sizeof(double);
    if (data_off + data_bytes + 8 != in.size()) {
        throw std::runtime_error("space file: data block size mismatch");
    }
    std::vector<double> data(static_cast<std::size_t>(rows) * dim);
    std::memcpy(data.data(), in.data() + data_off, data_bytes);

    return AttributeSpace::from_rows(dim, std::move(data), std::move(labels),
                                     header.at("schema_hash").get<std::string>(),
                                     header.at("checkpoint_digest").get<std::string>(),
                                     header.at("run_config_digest").get<std::string>());
}

}  // namespace mcg::space

#include "mcg/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "mcg/textclf.hpp"

namespace mcg::corpus {

namespace {

const std::vector<int> kEmptySet;

std::string origin_name(Sample::Origin o) {
    return o == Sample::Origin::Generated ? "generated" : "annotated";
}

Sample::Origin origin_from(const std::string& s) {
    if (s == "generated") return Sample::Origin::Generated;
    if (s == "annotated") return Sample::Origin::Annotated;
    throw std::invalid_argument("corpus: unknown origin '" + s + "'");
}

std::vector<std::string> split_tokens(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) {
        out.push_back(tok);
    }
    return out;
}

std::string join_tokens(const std::vector<std::string>& toks) {
    std::string out;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (i) out += ' ';
        out += toks[i];
    }
    return out;
}

// One sentence: two markers per expressed attribute, fillers up to a length
// drawn from [8, 16], order shuffled.
std::vector<std::string> make_text(const AttributeSchema& schema,
                                   const std::vector<std::pair<int, int>>& expressed,
                                   Rng& rng) {
    std::vector<std::string> toks;
    for (auto [t, a] : expressed) {
        const auto& pool = schema.aspect(t).attributes[static_cast<std::size_t>(a)].markers;
        toks.push_back(pool[rng.uniform_index(pool.size())]);
        toks.push_back(pool[rng.uniform_index(pool.size())]);
    }
    const int len = rng.uniform_range(8, 16);
    while (static_cast<int>(toks.size()) < len) {
        toks.push_back(schema.fillers[rng.uniform_index(schema.fillers.size())]);
    }
    rng.shuffle(toks);
    return toks;
}

}  // namespace

const std::vector<int>& IndexSets::cell(int t, int a, int k, int b) const {
    auto it = cells.find({t, a, k, b});
    return it == cells.end() ? kEmptySet : it->second;
}

std::vector<Sample> build_synthetic_corpus(const AttributeSchema& schema, int per_attr_count,
                                           std::pair<double, double> ratio, std::uint64_t seed) {
    schema.validate();
    if (per_attr_count < 1) {
        throw std::invalid_argument("build_synthetic_corpus: per_attr_count must be >= 1");
    }
    if (std::abs(ratio.first + ratio.second - 1.0) > 1e-9) {
        throw std::invalid_argument("build_synthetic_corpus: ratio proportions must sum to 1");
    }
    if (ratio.first <= 0.0 || ratio.second <= 0.0) {
        throw std::invalid_argument("build_synthetic_corpus: ratio component is zero; a cell would be empty");
    }
    const int s = schema.implicit_aspect();
    if (s < 0) {
        throw std::invalid_argument(
            "build_synthetic_corpus: schema needs exactly one implicit-annotated aspect");
    }
    if (schema.n_attrs(s) != 2) {
        throw std::invalid_argument(
            "build_synthetic_corpus: the implicit-annotated aspect must be binary");
    }

    // Remainder goes to the majority cell; a tie makes the first attribute the
    // majority side.
    const int minority_attr = ratio.second < ratio.first ? 1 : 0;
    const double minority_prop = std::min(ratio.first, ratio.second);
    const int n_minor = static_cast<int>(std::floor(minority_prop * per_attr_count + 1e-9));
    const int n_major = per_attr_count - n_minor;
    if (n_minor == 0 || n_major == 0) {
        throw std::invalid_argument("build_synthetic_corpus: a correlation cell would be empty");
    }

    Rng rng = seeded_rng(seed, "corpus");
    std::vector<Sample> out;
    int next_id = 0;
    for (int t = 0; t < schema.n_aspects(); ++t) {
        for (int a = 0; a < schema.n_attrs(t); ++a) {
            for (int i = 0; i < per_attr_count; ++i) {
                Sample smp;
                smp.id = next_id++;
                smp.explicit_aspect = t;
                smp.explicit_attr = a;
                smp.origin = Sample::Origin::Generated;
                if (t == s) {
                    smp.text = make_text(schema, {{t, a}}, rng);
                } else {
                    const int cell_attr =
                        i < n_major ? 1 - minority_attr : minority_attr;
                    smp.text = make_text(schema, {{t, a}, {s, cell_attr}}, rng);
                    smp.implicit_attrs[s] = cell_attr;
                }
                out.push_back(std::move(smp));
            }
        }
    }
    return out;
}

int gold_label(const AttributeSchema& schema, const Sample& smp, int aspect) {
    const Aspect& asp = schema.aspect(aspect);
    std::vector<int> counts(asp.attributes.size(), 0);
    for (const std::string& tok : smp.text) {
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

std::vector<Sample> strip_implicit(std::vector<Sample> samples, int aspect) {
    for (Sample& s : samples) {
        s.implicit_attrs.erase(aspect);
    }
    return samples;
}

std::vector<Sample> annotate_implicit(const std::vector<Sample>& samples, int aspect,
                                      AnnotateMode mode, const AttributeSchema& schema,
                                      const BowClassifier* probe) {
    if (aspect < 0 || aspect >= schema.n_aspects()) {
        throw std::invalid_argument("annotate_implicit: unknown aspect");
    }
    if (mode == AnnotateMode::Probe && probe == nullptr) {
        throw std::invalid_argument("annotate_implicit: probe mode requires a trained classifier");
    }
    if (mode == AnnotateMode::Probe && probe->aspect() != aspect) {
        throw std::invalid_argument("annotate_implicit: classifier was trained for another aspect");
    }
    std::vector<Sample> out;
    out.reserve(samples.size());
    for (const Sample& s : samples) {
        if (s.explicit_aspect == aspect) {
            throw std::invalid_argument(
                "annotate_implicit: aspect collides with a sample's explicit aspect");
        }
        if (s.implicit_attrs.count(aspect)) {
            throw std::invalid_argument("annotate_implicit: sample " + std::to_string(s.id) +
                                        " already labeled for the aspect");
        }
        Sample annotated = s;
        int label;
        if (mode == AnnotateMode::Gold) {
            label = gold_label(schema, s, aspect);
            if (label < 0) {
                throw std::runtime_error("annotate_implicit: sample " + std::to_string(s.id) +
                                         " has no unambiguous gold label");
            }
        } else {
            label = probe->predict(s.text);
        }
        annotated.implicit_attrs[aspect] = label;
        annotated.origin = Sample::Origin::Annotated;
        out.push_back(std::move(annotated));
    }
    return out;
}

IndexSets index_corpus(const std::vector<Sample>& samples) {
    std::set<int> seen;
    int n_aspects = 0;
    for (const Sample& s : samples) {
        if (!seen.insert(s.id).second) {
            throw std::invalid_argument("index_corpus: duplicate sample id " +
                                        std::to_string(s.id));
        }
        n_aspects = std::max(n_aspects, s.explicit_aspect + 1);
        for (const auto& [k, _] : s.implicit_attrs) {
            n_aspects = std::max(n_aspects, k + 1);
        }
    }

    std::vector<const Sample*> ordered;
    ordered.reserve(samples.size());
    for (const Sample& s : samples) {
        ordered.push_back(&s);
    }
    std::sort(ordered.begin(), ordered.end(),
              [](const Sample* a, const Sample* b) { return a->id < b->id; });

    IndexSets idx;
    idx.n_aspects = n_aspects;
    idx.by_aspect.resize(static_cast<std::size_t>(n_aspects));
    idx.by_attr.resize(static_cast<std::size_t>(n_aspects));
    for (const Sample* s : ordered) {
        auto& attr_sets = idx.by_attr[static_cast<std::size_t>(s->explicit_aspect)];
        if (static_cast<int>(attr_sets.size()) <= s->explicit_attr) {
            attr_sets.resize(static_cast<std::size_t>(s->explicit_attr) + 1);
        }
        idx.by_aspect[static_cast<std::size_t>(s->explicit_aspect)].push_back(s->id);
        attr_sets[static_cast<std::size_t>(s->explicit_attr)].push_back(s->id);
        for (const auto& [k, b] : s->implicit_attrs) {
            idx.cells[{s->explicit_aspect, s->explicit_attr, k, b}].push_back(s->id);
        }
    }
    return idx;
}

std::vector<ImbalanceRow> imbalance_report(const IndexSets& index) {
    bool any = false;
    for (const auto& v : index.by_aspect) {
        any = any || !v.empty();
    }
    if (!any) {
        throw std::invalid_argument("imbalance_report: empty index");
    }
    std::vector<ImbalanceRow> rows;
    for (const auto& [key, ids] : index.cells) {
        const auto [t, a, k, b] = key;
        // Denominator: all cells of that (explicit attr, implicit aspect) group.
        int total = 0;
        for (const auto& [key2, ids2] : index.cells) {
            if (key2[0] == t && key2[1] == a && key2[2] == k) {
                total += static_cast<int>(ids2.size());
            }
        }
        rows.push_back({t, a, k, b, static_cast<int>(ids.size()),
                        static_cast<double>(ids.size()) / total});
    }
    return rows;
}

std::string format_imbalance_report(const std::vector<ImbalanceRow>& rows,
                                    const AttributeSchema& schema) {
    std::ostringstream out;
    out << "explicit                 implicit                 count  proportion\n";
    for (const ImbalanceRow& r : rows) {
        std::ostringstream ex, im;
        ex << schema.aspect(r.explicit_aspect).name << "="
           << schema.aspect(r.explicit_aspect).attributes[static_cast<std::size_t>(r.explicit_attr)].name;
        im << schema.aspect(r.implicit_aspect).name << "="
           << schema.aspect(r.implicit_aspect).attributes[static_cast<std::size_t>(r.implicit_attr)].name;
        out << ex.str() << std::string(ex.str().size() < 25 ? 25 - ex.str().size() : 1, ' ')
            << im.str() << std::string(im.str().size() < 25 ? 25 - im.str().size() : 1, ' ');
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%5d  %.4f", r.count, r.proportion);
        out << buf << "\n";
    }
    return out.str();
}

// ----------------------------------------------------------------------------
// File format.

std::string serialize_corpus(const CorpusFile& c) {
    nlohmann::json header;
    header["format"] = "mcg-corpus";
    header["version"] = 1;
    header["schema"] = c.schema.to_json();
    header["schema_hash"] = c.schema_hash();
    header["vocab"] = c.vocab.tokens;
    header["build"] = {{"per_attr", c.per_attr_count},
                       {"ratio", {c.ratio.first, c.ratio.second}},
                       {"seed", c.seed}};
    header["run_config_digest"] = c.run_config_digest;

    std::string out = header.dump();
    out += '\n';
    for (const Sample& s : c.samples) {
        nlohmann::json rec;
        rec["id"] = s.id;
        rec["text"] = join_tokens(s.text);
        rec["explicit_aspect"] = c.schema.aspect(s.explicit_aspect).name;
        rec["explicit_attr"] =
            c.schema.aspect(s.explicit_aspect).attributes[static_cast<std::size_t>(s.explicit_attr)].name;
        nlohmann::json imp = nlohmann::json::object();
        for (const auto& [k, b] : s.implicit_attrs) {
            imp[c.schema.aspect(k).name] =
                c.schema.aspect(k).attributes[static_cast<std::size_t>(b)].name;
        }
        rec["implicit"] = std::move(imp);
        rec["origin"] = origin_name(s.origin);
        out += rec.dump();
        out += '\n';
    }
    return out;
}

CorpusFile parse_corpus(const std::string& content) {
    std::istringstream in(content);
    std::string line;
    if (!std::getline(in, line)) {
        throw std::runtime_error("corpus file: missing header");
    }
    const nlohmann::json header = nlohmann::json::parse(line);
    if (header.at("format").get<std::string>() != "mcg-corpus") {
        throw std::runtime_error("corpus file: unrecognized format tag");
    }
    CorpusFile c;
    c.schema = AttributeSchema::from_json(header.at("schema"));
    c.vocab = Vocabulary::from_tokens(header.at("vocab").get<std::vector<std::string>>());
    c.per_attr_count = header.at("build").at("per_attr").get<int>();
    const auto r = header.at("build").at("ratio");
    c.ratio = {r.at(0).get<double>(), r.at(1).get<double>()};
    c.seed = header.at("build").at("seed").get<std::uint64_t>();
    c.run_config_digest = header.value("run_config_digest", "");
    if (header.at("schema_hash").get<std::string>() != c.schema.hash()) {
        throw std::runtime_error("corpus file: schema hash mismatch");
    }

    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const nlohmann::json rec = nlohmann::json::parse(line);
        Sample s;
        s.id = rec.at("id").get<int>();
        s.text = split_tokens(rec.at("text").get<std::string>());
        s.explicit_aspect = c.schema.aspect_index(rec.at("explicit_aspect").get<std::string>());
        if (s.explicit_aspect < 0) {
            throw std::runtime_error("corpus file: unknown aspect in record");
        }
        s.explicit_attr =
            c.schema.attr_index(s.explicit_aspect, rec.at("explicit_attr").get<std::string>());
        if (s.explicit_attr < 0) {
            throw std::runtime_error("corpus file: unknown attribute in record");
        }
        for (const auto& [k, v] : rec.at("implicit").items()) {
            const int ka = c.schema.aspect_index(k);
            const int kb = ka < 0 ? -1 : c.schema.attr_index(ka, v.get<std::string>());
            if (ka < 0 || kb < 0) {
                throw std::runtime_error("corpus file: unknown implicit label in record");
            }
            s.implicit_attrs[ka] = kb;
        }
        s.origin = origin_from(rec.at("origin").get<std::string>());
        c.samples.push_back(std::move(s));
    }
    return c;
}

void save_corpus(const CorpusFile& c, const std::filesystem::path& path) {
    write_text_file(path, serialize_corpus(c));
}

CorpusFile load_corpus(const std::filesystem::path& path) {
    return parse_corpus(read_text_file(path));
}

SplitIds heldout_split(const std::vector<Sample>& samples, int every_kth) {
    std::map<std::string, int> counters;
    SplitIds out;
    std::vector<const Sample*> ordered;
    for (const Sample& s : samples) ordered.push_back(&s);
    std::sort(ordered.begin(), ordered.end(),
              [](const Sample* a, const Sample* b) { return a->id < b->id; });
    for (const Sample* s : ordered) {
        std::string key = std::to_string(s->explicit_aspect) + ":" +
                          std::to_string(s->explicit_attr);
        for (const auto& [k, b] : s->implicit_attrs) {
            key += ":" + std::to_string(k) + "=" + std::to_string(b);
        }
        const int c = counters[key]++;
        if (c % every_kth == every_kth - 1) {
            out.heldout.push_back(s->id);
        } else {
            out.train.push_back(s->id);
        }
    }
    return out;
}

}  // namespace mcg::corpus

#include "mcg/schema.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace mcg::corpus {

void AttributeSchema::validate() const {
    if (aspects.size() < 2) {
        throw std::invalid_argument("schema: at least two aspects required");
    }
    std::set<std::string> aspect_names;
    std::set<std::string> all_markers;
    for (const Aspect& a : aspects) {
        if (!aspect_names.insert(a.name).second) {
            throw std::invalid_argument("schema: duplicate aspect name '" + a.name + "'");
        }
        if (a.attributes.size() < 2) {
            throw std::invalid_argument("schema: aspect '" + a.name +
                                        "' needs at least two attributes");
        }
        std::set<std::string> attr_names;
        for (const Attribute& at : a.attributes) {
            if (!attr_names.insert(at.name).second) {
                throw std::invalid_argument("schema: duplicate attribute '" + at.name +
                                            "' in aspect '" + a.name + "'");
            }
            if (at.markers.empty()) {
                throw std::invalid_argument("schema: attribute '" + at.name +
                                            "' has no marker tokens");
            }
            for (const std::string& m : at.markers) {
                if (!all_markers.insert(m).second) {
                    throw std::invalid_argument("schema: marker '" + m +
                                                "' appears in more than one pool");
                }
            }
        }
    }
    if (fillers.empty()) {
        throw std::invalid_argument("schema: filler pool is empty");
    }
    for (const std::string& f : fillers) {
        if (all_markers.count(f)) {
            throw std::invalid_argument("schema: filler '" + f + "' collides with a marker");
        }
    }
}

int AttributeSchema::aspect_index(const std::string& name) const {
    for (std::size_t i = 0; i < aspects.size(); ++i) {
        if (aspects[i].name == name) {
            return static_cast<int>(i);
        }
    }
    return -1;
}

int AttributeSchema::attr_index(int aspect_id, const std::string& name) const {
    const Aspect& a = aspect(aspect_id);
    for (std::size_t i = 0; i < a.attributes.size(); ++i) {
        if (a.attributes[i].name == name) {
            return static_cast<int>(i);
        }
    }
    return -1;
}

int AttributeSchema::implicit_aspect() const {
    int found = -1;
    for (std::size_t i = 0; i < aspects.size(); ++i) {
        if (aspects[i].role == AspectRole::ImplicitAnnotated) {
            if (found >= 0) {
                return -1;
            }
            found = static_cast<int>(i);
        }
    }
    return found;
}

nlohmann::json AttributeSchema::to_json() const {
    nlohmann::json j;
    j["aspects"] = nlohmann::json::array();
    for (const Aspect& a : aspects) {
        nlohmann::json ja;
        ja["name"] = a.name;
        ja["role"] = a.role == AspectRole::ImplicitAnnotated ? "implicit-annotated"
                                                             : "explicit-labeled";
        ja["attributes"] = nlohmann::json::array();
        for (const Attribute& at : a.attributes) {
            ja["attributes"].push_back({{"name", at.name}, {"markers", at.markers}});
        }
        j["aspects"].push_back(std::move(ja));
    }
    j["fillers"] = fillers;
    return j;
}

AttributeSchema AttributeSchema::from_json(const nlohmann::json& j) {
    AttributeSchema s;
    for (const auto& ja : j.at("aspects")) {
        Aspect a;
        a.name = ja.at("name").get<std::string>();
        const std::string role = ja.at("role").get<std::string>();
        if (role == "implicit-annotated") {
            a.role = AspectRole::ImplicitAnnotated;
        } else if (role == "explicit-labeled") {
            a.role = AspectRole::ExplicitLabeled;
        } else {
            throw std::invalid_argument("schema: unknown role '" + role + "'");
        }
        for (const auto& jat : ja.at("attributes")) {
            Attribute at;
            at.name = jat.at("name").get<std::string>();
            at.markers = jat.at("markers").get<std::vector<std::string>>();
            a.attributes.push_back(std::move(at));
        }
        s.aspects.push_back(std::move(a));
    }
    s.fillers = j.at("fillers").get<std::vector<std::string>>();
    s.validate();
    return s;
}

AttributeSchema AttributeSchema::load(const std::filesystem::path& path) {
    return from_json(nlohmann::json::parse(read_text_file(path)));
}

AttributeSchema desk_schema() {
    AttributeSchema s;
    Aspect topic;
    topic.name = "topic";
    topic.role = AspectRole::ExplicitLabeled;
    topic.attributes = {
        {"sport", {"stadium", "coach", "match", "league", "tournament", "goalkeeper"}},
        {"world", {"embassy", "treaty", "border", "summit", "diplomat", "parliament"}},
    };
    Aspect sentiment;
    sentiment.name = "sentiment";
    sentiment.role = AspectRole::ImplicitAnnotated;
    // Listed majority-first: the desk imbalance ratio 0.7:0.3 maps onto the
    // attribute order, giving each topic a negative-dominant skew.
    sentiment.attributes = {
        {"negative", {"dreadful", "gloomy", "miserable", "bleak", "awful", "grim"}},
        {"positive", {"wonderful", "delightful", "superb", "cheerful", "brilliant", "charming"}},
    };
    s.aspects = {topic, sentiment};
    s.fillers = {"the", "a",    "report", "news", "story", "day",  "week",
                 "city", "people", "plan",   "event", "time", "view", "case",
                 "note", "word",  "line",   "page", "item",  "thing"};
    s.validate();
    return s;
}

Vocabulary Vocabulary::from_schema(const AttributeSchema& schema) {
    std::set<std::string> toks;
    for (const Aspect& a : schema.aspects) {
        for (const Attribute& at : a.attributes) {
            toks.insert(at.markers.begin(), at.markers.end());
        }
    }
    toks.insert(schema.fillers.begin(), schema.fillers.end());
    std::vector<std::string> ordered = {"<bos>", "<eos>"};
    ordered.insert(ordered.end(), toks.begin(), toks.end());
    return from_tokens(std::move(ordered));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    Vocabulary v;
    v.tokens = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens.size(); ++i) {
        if (!v.index.emplace(v.tokens[i], static_cast<int>(i)).second) {
            throw std::invalid_argument("vocabulary: duplicate token '" + v.tokens[i] + "'");
        }
    }
    v.bos = v.id("<bos>");
    v.eos = v.id("<eos>");
    return v;
}

int Vocabulary::id(const std::string& tok) const {
    auto it = index.find(tok);
    if (it == index.end()) {
        throw std::invalid_argument("token not in vocabulary: '" + tok + "'");
    }
    return it->second;
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (const std::string& t : text) {
        ids.push_back(id(t));
    }
    return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) {
        out.push_back(tokens.at(static_cast<std::size_t>(i)));
    }
    return out;
}

}  // namespace mcg::corpus

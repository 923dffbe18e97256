#pragma once

// Attribute schema and the closed token vocabulary derived from it.
//
// An aspect is a category of control (topic, sentiment, ...) holding mutually
// exclusive attributes. Attributes own disjoint marker-token pools; together
// with the shared filler pool they define the whole token universe, so
// attribute expression in any text is machine-checkable by marker counting.

#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mcg/common.hpp"

namespace mcg::corpus {

enum class AspectRole {
    ExplicitLabeled,    // samples of this aspect carry annotated explicit labels
    ImplicitAnnotated,  // additionally annotated as an implicit label on other aspects' samples
};

struct Attribute {
    std::string name;
    std::vector<std::string> markers;
};

struct Aspect {
    std::string name;
    AspectRole role = AspectRole::ExplicitLabeled;
    std::vector<Attribute> attributes;
};

struct AttributeSchema {
    std::vector<Aspect> aspects;
    std::vector<std::string> fillers;

    // Throws std::invalid_argument on any structural violation: fewer than two
    // aspects, fewer than two attributes in an aspect, duplicate attribute
    // names, overlapping marker pools, or an empty filler pool.
    void validate() const;

    int aspect_index(const std::string& name) const;           // -1 when absent
    int attr_index(int aspect, const std::string& name) const;  // -1 when absent

    // Index of the single implicit-annotated aspect, or -1 if none/multiple.
    int implicit_aspect() const;

    const Aspect& aspect(int t) const { return aspects.at(static_cast<std::size_t>(t)); }
    int n_aspects() const { return static_cast<int>(aspects.size()); }
    int n_attrs(int t) const { return static_cast<int>(aspect(t).attributes.size()); }

    nlohmann::json to_json() const;
    static AttributeSchema from_json(const nlohmann::json& j);
    static AttributeSchema load(const std::filesystem::path& path);

    // Digest of the canonical JSON form; artifacts built from different
    // schemas refuse to mix.
    std::string hash() const { return to_hex(fnv1a(to_json().dump())); }
};

// Built-in two-aspect schema used by the desk preset and most tests.
AttributeSchema desk_schema();

// Closed vocabulary: reserved specials first, then all schema tokens sorted.
struct Vocabulary {
    std::vector<std::string> tokens;
    std::unordered_map<std::string, int> index;
    int bos = 0;
    int eos = 1;

    static Vocabulary from_schema(const AttributeSchema& schema);
    static Vocabulary from_tokens(std::vector<std::string> tokens);

    int size() const { return static_cast<int>(tokens.size()); }
    bool contains(const std::string& tok) const { return index.count(tok) > 0; }

    // Throws naming the offending token.
    int id(const std::string& tok) const;
    std::vector<int> encode(const std::vector<std::string>& text) const;
    std::vector<std::string> decode(const std::vector<int>& ids) const;
};

}  // namespace mcg::corpus

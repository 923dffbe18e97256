#pragma once

// Shared utilities: seeded RNG, content digests, small file helpers.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mcg {

// ----------------------------------------------------------------------------
// FNV-1a 64-bit digests. Used for artifact fingerprints and frozen-parameter
// audits; not cryptographic.

inline constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) {
    return fnv1a(s.data(), s.size(), h);
}

inline std::uint64_t fnv1a(const std::vector<double>& v, std::uint64_t h = kFnvOffset) {
    return v.empty() ? h : fnv1a(v.data(), v.size() * sizeof(double), h);
}

std::string to_hex(std::uint64_t x);

// ----------------------------------------------------------------------------
// Deterministic RNG.
//
// All randomness in the project flows through this class so that a run is
// fully reproducible from a single seed. mt19937_64 has a standardized
// sequence, and the float/gauss constructions below avoid the
// implementation-defined std::*_distribution classes.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed), seed_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) {
            throw std::invalid_argument("Rng::uniform_int: n must be positive");
        }
        // Rejection sampling keeps the draw unbiased.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = eng_();
        while (x >= limit) {
            x = eng_();
        }
        return x % n;
    }

    std::size_t uniform_index(std::size_t n) {
        return static_cast<std::size_t>(uniform_int(static_cast<std::uint64_t>(n)));
    }

    // Integer in [lo, hi] inclusive.
    int uniform_range(int lo, int hi) {
        return lo + static_cast<int>(uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    // Standard normal via Box-Muller with a cached spare.
    double gauss() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        while (u1 <= 0.0) {
            u1 = uniform01();
        }
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derive an independent stream for a named purpose. Derivation reads the
    // construction seed, not the engine state, so call order does not matter.
    Rng derive(std::string_view tag) const {
        return Rng(fnv1a(tag, fnv1a(&seed_, sizeof(seed_))));
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::mt19937_64 eng_;
    std::uint64_t seed_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline Rng seeded_rng(std::uint64_t seed, std::string_view tag) {
    return Rng(seed).derive(tag);
}

// ----------------------------------------------------------------------------
// Small file helpers.

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view content);
std::uint64_t file_digest(const std::filesystem::path& path);

}  // namespace mcg

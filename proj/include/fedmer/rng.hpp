#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace fedmer {

// FNV-1a, used to derive named sub-seeds so that every random stream in an
// experiment hangs off one master seed.
inline std::uint64_t hash_seed(std::uint64_t seed, std::string_view name) {
    std::uint64_t h = 14695981039346656037ull ^ seed;
    for (unsigned char c : name) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t hash_seed(std::uint64_t seed, std::string_view name, std::uint64_t index) {
    std::uint64_t h = hash_seed(seed, name);
    h ^= index + 0x9e3779b97f4a7c15ull;
    h *= 1099511628211ull;
    return h;
}

// mt19937_64 plus hand-rolled double conversions. std::* distributions are
// not pinned across library versions, so uniform/normal are implemented here
// to keep runs reproducible for a given platform and binary.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        // rejection sampling to avoid modulo bias
        const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    // Box-Muller; one value per call, cached pair discarded for simplicity.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Fisher-Yates
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace fedmer

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace wecolora {

// Deterministic random source. All sampling is built from raw mt19937_64
// draws (no std::*_distribution) so streams are identical across standard
// library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller (cosine branch only, stateless)
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double sigma) { return sigma * normal(); }

    // N(0, sigma^2) truncated by rejection at +-clip*sigma
    double truncated_normal(double sigma, double clip = 2.0) {
        for (;;) {
            double z = normal();
            if (std::fabs(z) <= clip) return sigma * z;
        }
    }

    // uniform index in [0, n)
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(
            (static_cast<__uint128_t>(gen_()) * n) >> 64);
    }

    // Fisher-Yates, self-rolled for cross-platform determinism
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace wecolora

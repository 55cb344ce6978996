#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace agp {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derives an independent stream seed from a root seed and a tuple of
/// counters (epoch, step, sample, view...). All randomness in training is
/// keyed this way, so the generator state never needs checkpointing.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> keys) {
    std::uint64_t h = splitmix64(root);
    for (auto k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
    return h;
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

/// Standard normal via Box-Muller so draws are identical across standard
/// library implementations.
inline double standard_normal(Rng& rng) {
    double u1 = 0.0;
    do {
        u1 = uniform01(rng);
    } while (u1 <= 0.0);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline double normal(Rng& rng, double mean, double stddev) { return mean + stddev * standard_normal(rng); }

/// Normal truncated to two standard deviations (resampling).
inline double truncated_normal(Rng& rng, double stddev) {
    for (;;) {
        const double z = standard_normal(rng);
        if (std::abs(z) <= 2.0) return z * stddev;
    }
}

} // namespace agp

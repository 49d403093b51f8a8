#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace d2t {

// splitmix64-style mixer; derives independent stream seeds from (seed, tag).
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t tag_seed(uint64_t seed, std::string_view tag) {
    uint64_t h = 1469598103934665603ull;  // FNV-1a offset basis
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ull;
    }
    return mix_seed(seed, h);
}

// Seedable RNG with hand-rolled distributions. std::{uniform_real,normal}_
// distribution are implementation-defined, so all draws go through explicit
// formulas to keep runs byte-reproducible.
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t raw() { return gen_(); }

    // [0,1), 53-bit resolution
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; the sine partner is discarded so state advances by exactly
    // two raw draws per call.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // circularly-symmetric complex normal with E|z|^2 = 1
    std::complex<double> cnormal() {
        const double re = normal();
        const double im = normal();
        return {re * std::numbers::sqrt2 / 2.0, im * std::numbers::sqrt2 / 2.0};
    }

    // [0,n), rejection sampled (unbiased)
    uint64_t integer(uint64_t n) {
        if (n == 0) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = gen_();
        while (x >= limit) x = gen_();
        return x % n;
    }

    // child stream derived from current state + tag; advances this stream once
    Rng fork(std::string_view tag) { return Rng(tag_seed(gen_(), tag)); }

  private:
    std::mt19937_64 gen_;
};

}  // namespace d2t

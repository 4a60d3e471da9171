#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "neti/common.hpp"

namespace neti {

// Deterministic random source. The engine is pinned to mt19937_64 and all
// distributions are implemented by hand so that a given seed produces the
// same stream on every platform and standard library. Do not replace these
// with std:: distributions; their output is implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), eng_(seed) {}

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() { return eng_(); }

    // Uniform double in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection sampling, so no modulo bias.
    uint64_t below(uint64_t n) {
        require(n > 0, "Rng::below: n must be positive");
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = eng_();
        while (v >= limit) {
            v = eng_();
        }
        return v % n;
    }

    // Standard normal via Box-Muller. The second variate of each pair is
    // cached, so draws come in a fixed, reproducible order.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = kTwoPi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Independent child stream. Forks are keyed, not sequential, so the
    // parent stream position does not influence the child.
    Rng fork(uint64_t key) const { return Rng(mix64(seed_ ^ mix64(key + 0x9E3779B97F4A7C15ull))); }

    // splitmix64 finalizer; used to derive well-spread seeds from keys.
    static uint64_t mix64(uint64_t x) {
        x += 0x9E3779B97F4A7C15ull;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
        return x ^ (x >> 31);
    }

private:
    static constexpr double kTwoPi = 6.283185307179586476925286766559;

    uint64_t seed_;
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace neti

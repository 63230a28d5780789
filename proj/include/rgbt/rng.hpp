#pragma once

#include <cmath>
#include <cstdint>

#include "rgbt/common.hpp"

namespace rgbt {

// Counter-based generator. Every draw is a hash of (key, counter), and
// independent streams are derived with fork(), so per-step / per-image noise
// replays identically no matter what other streams were consumed in between.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x6a09e667f3bcc909ull)) {}

    // Derives an independent stream. Forking the same (key, stream) pair
    // always yields the same child generator.
    Rng fork(std::uint64_t stream) const {
        return Rng(FromKey{}, mix(key_ ^ mix(stream * 0xd1342543de82ef95ull + 0x632be59bd9b4e019ull)));
    }

    std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // (0, 1]
    double uniform_open() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive on both ends.
    i64 uniform_int(i64 lo, i64 hi) {
        return lo + static_cast<i64>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
    }

    // Standard normal via Box-Muller; consumes exactly two draws per value.
    double normal() {
        double u1 = uniform_open();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

  private:
    struct FromKey {};
    Rng(FromKey, std::uint64_t key) : key_(key) {}

    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace rgbt

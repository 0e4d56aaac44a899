#pragma once

#include <cstdint>
#include <random>

namespace pcseg {

// mt19937_64 with hand-mapped draws. The engine's bit stream is pinned by the
// standard; std::uniform_real_distribution is not, so mapping is done here to
// keep seeded runs bit-reproducible across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53 random mantissa bits.
    double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    bool bernoulli(double p) { return uniform01() < p; }

    // Inclusive bounds. Modulo bias is irrelevant at the ranges used here.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return lo + static_cast<std::int64_t>(eng_() % static_cast<std::uint64_t>(hi - lo + 1));
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace pcseg

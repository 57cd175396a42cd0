#pragma once

/// Random number discipline.
///
/// Every stochastic routine takes an explicit `Rng` (or a 64-bit seed that
/// is turned into one). The engine is `std::mt19937_64`, whose output
/// sequence is fixed by the C++ standard; the uniform and normal transforms
/// are implemented here rather than taken from `<random>` distributions,
/// which are implementation-defined. Seeds for independent streams are
/// derived with SplitMix64 mixing.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>

namespace dynaguide {

/// SplitMix64 finalizer.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Derive a child seed from a root seed and a list of stream indices.
inline std::uint64_t derive_seed(std::uint64_t root, std::initializer_list<std::uint64_t> path) noexcept {
    std::uint64_t h = splitmix64(root);
    for (auto p : path) h = splitmix64(h ^ splitmix64(p + 0x632BE59BD9B4E019ULL));
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform in (0, 1].
    double uniform_open_zero() { return (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53; }

    /// Uniform integer in [lo, hi] (inclusive), rejection sampled.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1ULL;
        if (span == 0) return static_cast<std::int64_t>(engine_());
        const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % span);
        std::uint64_t r;
        do { r = engine_(); } while (r >= limit);
        return lo + static_cast<std::int64_t>(r % span);
    }

    /// Standard normal via Box-Muller; the second variate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_open_zero();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace dynaguide

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ulr {

// Stateless mixing used for keyed (counter-based) streams.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t value) noexcept {
    return mix64(seed ^ mix64(value));
}

/// Uniform double in [0, 1) from the top 53 bits.
constexpr double to_unit_double(std::uint64_t bits) noexcept {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Counter-based uniform generator: value i of a stream depends only on (key, i).
/// Used for dropout so results are independent of evaluation order.
class KeyedUniform {
public:
    constexpr explicit KeyedUniform(std::uint64_t key) noexcept : key_(mix64(key)) {}

    constexpr double operator()(std::uint64_t counter) const noexcept {
        return to_unit_double(mix64(key_ + counter * 0xD1B54A32D192ED03ULL));
    }

private:
    std::uint64_t key_;
};

/// Sequential splitmix64 generator. Sampling helpers are implemented here rather than
/// with <random> distributions so draws are identical across standard libraries.
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed) noexcept : state_(seed) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return ~result_type{0}; }

    result_type operator()() noexcept {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    double uniform() noexcept { return to_unit_double((*this)()); }

    /// Uniform integer in [0, n). Uses rejection to avoid modulo bias.
    std::uint64_t below(std::uint64_t n) noexcept {
        if (n <= 1) {
            return 0;
        }
        const std::uint64_t limit = max() - max() % n;
        std::uint64_t x;
        do {
            x = (*this)();
        } while (x >= limit);
        return x % n;
    }

    double normal() noexcept {
        // Box-Muller, discarding the second variate to keep the stream simple.
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Normal(0, stddev) truncated to two standard deviations.
    double truncated_normal(double stddev) noexcept {
        double z;
        do {
            z = normal();
        } while (std::abs(z) > 2.0);
        return z * stddev;
    }

    template <typename It>
    void shuffle(It first, It last) noexcept {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            std::swap(first[i - 1], first[below(i)]);
        }
    }

private:
    std::uint64_t state_;
};

}  // namespace ulr

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ntklab/errors.hpp"

namespace ntklab {

// Counter-based pseudo-random generator. Draw i is a pure function of
// (seed, i): out = mix64(seed + i * GAMMA), the SplitMix64 construction.
// No platform-dependent library distributions are used anywhere, so a seed
// reproduces the exact same stream on every build.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t next_u64() { return mix64(seed_ + (++counter_) * kGamma); }

    // Uniform on [0, 1), 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform on (0, 1]; safe to feed into log().
    double next_double_open() {
        return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller; the paired draw is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = next_double_open();
        const double u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * kPi * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Unbiased integer on [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw ConfigError("Rng::below: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t r = next_u64();
        while (r >= limit) r = next_u64();
        return r % n;
    }

    // Marsaglia-Tsang; shape < 1 is boosted through shape + 1.
    double gamma_sample(double shape) {
        if (!(shape > 0.0)) throw ConfigError("Rng::gamma_sample: shape must be positive");
        if (shape < 1.0) {
            const double u = next_double_open();
            return gamma_sample(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) continue;
            v = v * v * v;
            const double u = next_double_open();
            if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
        }
    }

    double beta_sample(double a, double b) {
        const double x = gamma_sample(a);
        const double y = gamma_sample(b);
        return x / (x + y);
    }

    // Fisher-Yates.
    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        for (std::size_t i = n; i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(p[i - 1], p[j]);
        }
        return p;
    }

    // Independent substream; forks with distinct ids never collide in practice.
    Rng fork(std::uint64_t stream) const { return Rng(mix64(seed_ ^ mix64(stream + kGamma))); }

private:
    static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;
    static constexpr double kPi = 3.14159265358979323846;

    static std::uint64_t mix64(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace ntklab

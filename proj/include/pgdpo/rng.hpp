// SPDX-License-Identifier: Apache-2.0
#pragma once

// Counter-based random numbers: Philox4x32-10 (Salmon et al., SC'11).
// A draw is a pure function of (seed, counter), so any path or step can be
// regenerated independently of how work is split across threads.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace pgdpo {

class Philox4x32 {
public:
    using Counter = std::array<std::uint32_t, 4>;

    explicit Philox4x32(std::uint64_t seed)
        : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)} {}

    Counter operator()(Counter ctr) const {
        std::array<std::uint32_t, 2> key = key_;
        for (int round = 0; round < 10; ++round) {
            ctr = single_round(ctr, key);
            key[0] += kWeyl0;
            key[1] += kWeyl1;
        }
        return ctr;
    }

private:
    static constexpr std::uint32_t kMul0 = 0xD2511F53u;
    static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

    static Counter single_round(const Counter& c, const std::array<std::uint32_t, 2>& k) {
        const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * c[0];
        const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * c[2];
        const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
        const auto lo0 = static_cast<std::uint32_t>(p0);
        const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
        const auto lo1 = static_cast<std::uint32_t>(p1);
        return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
    }

    std::array<std::uint32_t, 2> key_;
};

/// Independent streams within one seed.
enum class Stream : std::uint32_t {
    Node = 1,       // initial (t0, x0) of a training path
    Brownian = 2,   // training Brownian increments
    EvalNode = 3,   // evaluation rollouts
    EvalBrownian = 4,
    Probe = 5,      // held-out / diagnostic batches
    ProbeBrownian = 6,
    Init = 7,       // network initialization
};

/// Keyed by (seed, iteration, path, step, stream).
class CounterRng {
public:
    explicit CounterRng(std::uint64_t seed) : philox_(seed) {}

    /// Two independent uniforms in [0, 1).
    std::array<double, 2> uniform2(std::uint32_t iteration, std::uint32_t path, std::uint32_t step,
                                   Stream stream) const {
        const auto r = philox_({iteration, path, step, static_cast<std::uint32_t>(stream)});
        return {to_unit(r[0], r[1]), to_unit(r[2], r[3])};
    }

    double uniform(std::uint32_t iteration, std::uint32_t path, std::uint32_t step, Stream stream) const {
        return uniform2(iteration, path, step, stream)[0];
    }

    /// Standard normal via Box-Muller.
    double normal(std::uint32_t iteration, std::uint32_t path, std::uint32_t step, Stream stream) const {
        const auto u = uniform2(iteration, path, step, stream);
        const double radius = std::sqrt(-2.0 * std::log(1.0 - u[0]));  // 1 - u in (0, 1]
        return radius * std::cos(2.0 * std::numbers::pi * u[1]);
    }

private:
    static double to_unit(std::uint32_t hi, std::uint32_t lo) {
        const std::uint64_t bits = (static_cast<std::uint64_t>(hi) << 32) | lo;
        return static_cast<double>(bits >> 11) * 0x1.0p-53;
    }

    Philox4x32 philox_;
};

}  // namespace pgdpo

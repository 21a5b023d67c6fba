// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "pgdpo/rng.hpp"

using namespace pgdpo;

TEST_CASE("Philox4x32-10 known-answer vectors", "[rng]") {
    using C = Philox4x32::Counter;
    CHECK(Philox4x32(0)({0, 0, 0, 0}) == C{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u});
    CHECK(Philox4x32(~0ull)({~0u, ~0u, ~0u, ~0u}) == C{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu});
    CHECK(Philox4x32(0x299f31d0a4093822ull)({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}) ==
          C{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u});
}

TEST_CASE("draws are pure functions of the key", "[rng]") {
    const CounterRng a(42);
    const CounterRng b(42);
    for (std::uint32_t i = 0; i < 100; ++i) {
        CHECK(a.normal(i, 3 * i, 7, Stream::Brownian) == b.normal(i, 3 * i, 7, Stream::Brownian));
    }
    CHECK(a.uniform(1, 2, 3, Stream::Node) != CounterRng(43).uniform(1, 2, 3, Stream::Node));
    CHECK(a.uniform(1, 2, 3, Stream::Node) != a.uniform(1, 2, 3, Stream::EvalNode));
    CHECK(a.uniform(1, 2, 3, Stream::Node) != a.uniform(2, 2, 3, Stream::Node));
}

TEST_CASE("uniforms lie in [0, 1) and normals have unit moments", "[rng]") {
    const CounterRng rng(7);
    const int n = 200000;
    double sum = 0.0;
    double sum2 = 0.0;
    double usum = 0.0;
    std::set<double> distinct;
    for (int i = 0; i < n; ++i) {
        const auto u = rng.uniform2(0, static_cast<std::uint32_t>(i), 0, Stream::Probe);
        REQUIRE(u[0] >= 0.0);
        REQUIRE(u[0] < 1.0);
        REQUIRE(u[1] >= 0.0);
        REQUIRE(u[1] < 1.0);
        usum += u[0];
        if (i < 1000) distinct.insert(u[0]);
        const double z = rng.normal(1, static_cast<std::uint32_t>(i), 0, Stream::Probe);
        REQUIRE(std::isfinite(z));
        sum += z;
        sum2 += z * z;
    }
    CHECK(distinct.size() == 1000);
    CHECK(std::abs(usum / n - 0.5) < 5.0 * std::sqrt(1.0 / 12.0 / n));
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    CHECK(std::abs(mean) < 5.0 / std::sqrt(n));
    CHECK(std::abs(var - 1.0) < 5.0 * std::sqrt(2.0 / n));
}

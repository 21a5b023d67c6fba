// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "pgdpo/nn.hpp"

using namespace pgdpo;
using Catch::Approx;

namespace {

Mlp random_net(Head head, std::uint64_t seed, std::vector<int> sizes = {2, 7, 5, 1}) {
    Mlp net = mlp_init(sizes, head, seed, kDefaultSlope, 1.3);
    // Non-zero biases so every code path sees them.
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
        for (int i = 0; i < sizes[l + 1]; ++i) net.params()[net.bias_offset(l) + i] = u(gen);
    }
    return net;
}

}  // namespace

TEST_CASE("mlp_init shapes and parameter count", "[nn]") {
    const Mlp net = mlp_init({2, 200, 200, 1}, Head::Investment, 0);
    CHECK(net.num_params() == 2 * 200 + 200 + 200 * 200 + 200 + 200 * 1 + 1);
    CHECK(net.num_params() == 41001);
    CHECK(net.layer_sizes() == std::vector<int>{2, 200, 200, 1});

    CHECK_THROWS_AS(mlp_init({3, 1}, Head::Investment, 0), UsageError);
    CHECK_THROWS_AS(mlp_init({2, 4, 2}, Head::Investment, 0), UsageError);
    CHECK_THROWS_AS(mlp_init({2}, Head::Investment, 0), UsageError);
    CHECK_THROWS_AS(mlp_init({2, 0, 1}, Head::Investment, 0), UsageError);
    CHECK_THROWS_AS(mlp_init({2, 4, 1}, Head::Investment, 0, 1.5), UsageError);
}

TEST_CASE("mlp_init is deterministic and fan-in scaled", "[nn]") {
    const Mlp a = mlp_init({2, 200, 200, 1}, Head::Consumption, 0);
    const Mlp b = mlp_init({2, 200, 200, 1}, Head::Consumption, 0);
    const Mlp c = mlp_init({2, 200, 200, 1}, Head::Consumption, 1);
    CHECK(std::equal(a.params().begin(), a.params().end(), b.params().begin()));
    CHECK_FALSE(std::equal(a.params().begin(), a.params().end(), c.params().begin()));

    const std::vector<int> sizes{2, 200, 200, 1};
    for (std::size_t l = 0; l < a.num_layers(); ++l) {
        const double bound = std::sqrt(6.0 / sizes[l]);
        const auto n = static_cast<std::size_t>(sizes[l]) * sizes[l + 1];
        double sumsq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double w = a.params()[a.weight_offset(l) + i];
            REQUIRE(std::abs(w) <= bound);
            sumsq += w * w;
        }
        // Uniform(-b, b) has variance b^2 / 3.
        if (n > 100) CHECK(sumsq / n == Approx(bound * bound / 3.0).epsilon(0.1));
        for (int i = 0; i < sizes[l + 1]; ++i) REQUIRE(a.params()[a.bias_offset(l) + i] == 0.0);
    }
}

TEST_CASE("policy_eval with zero weights", "[nn]") {
    const Mlp c_net({2, 4, 4, 1}, Head::Consumption);
    const Mlp pi_net({2, 4, 4, 1}, Head::Investment);
    ad::Tape tape;
    CHECK(policy_eval(c_net, 0.3, tape.variable(1.0), tape).value() == Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(policy_eval(c_net, 0.3, tape.variable(2.0), tape).value() == Approx(2.0 * std::log(2.0)).epsilon(1e-15));
    CHECK(policy_eval(pi_net, 0.3, tape.variable(1.0), tape).value() == 0.0);
}

TEST_CASE("policy_eval is reproducible and rejects non-finite inputs", "[nn]") {
    const Mlp net = mlp_init({2, 16, 16, 1}, Head::Consumption, 9);
    ad::Tape t1;
    ad::Tape t2;
    CHECK(policy_eval(net, 0.4, t1.variable(0.9), t1).value() == policy_eval(net, 0.4, t2.variable(0.9), t2).value());
    CHECK(policy_eval(net, 0.4, t1.variable(0.9), t1).value() == Approx(net.control(0.4, 0.9)).epsilon(1e-14));
    CHECK_THROWS_AS(policy_eval(net, std::nan(""), t1.variable(0.9), t1), NumericError);
    CHECK_THROWS_AS(policy_eval(net, 0.1, t1.variable(INFINITY), t1), NumericError);
}

TEST_CASE("consumption head is positive for any finite parameters", "[nn][property]") {
    std::mt19937_64 gen(2);
    std::uniform_real_distribution<double> wide(-50.0, 50.0);
    for (int trial = 0; trial < 200; ++trial) {
        Mlp net({2, 6, 6, 1}, Head::Consumption);
        for (auto& p : net.params()) p = wide(gen);
        for (double t : {0.0, 0.5, 1.0}) {
            for (double x : {1e-6, 0.1, 1.0, 2.0, 50.0}) REQUIRE(net.control(t, x) > 0.0);
        }
    }
}

TEST_CASE("investment head is clamped", "[nn]") {
    Mlp net({2, 1}, Head::Investment);
    net.params()[2] = 100.0;  // bias
    CHECK(net.control(0.0, 1.0) == kPiBound);
    net.params()[2] = -100.0;
    CHECK(net.control(0.0, 1.0) == -kPiBound);
}

TEST_CASE("tape derivative in wealth matches finite differences", "[nn][property]") {
    for (Head head : {Head::Investment, Head::Consumption}) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const Mlp net = random_net(head, seed);
            for (double x : {0.15, 0.8, 1.9}) {
                ad::Tape tape;
                const ad::Var xv = tape.variable(x);
                const double g = ad::grad(policy_eval(net, 0.35, xv, tape), xv);
                const double h = 1e-6;
                const double fd = (net.control(0.35, x + h) - net.control(0.35, x - h)) / (2 * h);
                INFO("seed " << seed << " x " << x);
                CHECK(std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-12}) < 1e-5);
            }
        }
    }
}

TEST_CASE("batched passes agree with the tape", "[nn]") {
    const Mlp net = random_net(Head::Consumption, 4);
    RowVec t(5), x(5);
    t << 0.0, 0.2, 0.5, 0.7, 1.0;
    x << 0.1, 0.6, 1.0, 1.4, 2.0;
    MlpCache cache;
    RowVec z;
    net.forward(t, x, cache, z);

    RowVec dx = RowVec::Ones(5);
    RowVec ddx = RowVec::Zero(5);
    RowVec dz, ddz;
    net.tangent(cache, dx, ddx, dz, ddz);

    RowVec zbar(5);
    zbar << 1.0, -0.5, 2.0, 0.25, -1.0;
    std::vector<double> grad(net.num_params(), 0.0);
    RowVec xbar;
    net.backward(cache, zbar, grad, xbar);

    ad::Tape tape;
    const auto pv = net.register_params(tape);
    ad::Var sum = tape.constant(0.0);
    std::vector<ad::Var> xs;
    for (int j = 0; j < 5; ++j) {
        xs.push_back(tape.variable(x(j)));
        const ad::Var zj = net.raw(pv, t(j), xs.back());
        CHECK(zj.value() == Approx(z(j)).epsilon(1e-14));
        CHECK(zj.value() == Approx(net.raw(t(j), x(j))).epsilon(1e-14));
        CHECK(ad::grad(zj, xs.back()) == Approx(dz(j)).epsilon(1e-13));
        CHECK(ddz(j) == 0.0);
        sum = sum + zbar(j) * zj;
    }
    const auto g = ad::grad(sum, pv);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(grad[i] == Approx(g[i]).epsilon(1e-12).margin(1e-14));
    const auto gx = ad::grad(sum, xs);
    for (int j = 0; j < 5; ++j) CHECK(xbar(j) == Approx(gx[static_cast<std::size_t>(j)]).epsilon(1e-12).margin(1e-14));
}

TEST_CASE("adam_step: zero gradient, first step, determinism", "[nn][adam]") {
    std::vector<double> p{0.5, -1.0, 2.0};
    auto s = adam_init(3);
    adam_step(p, std::vector<double>{0.0, 0.0, 0.0}, s, 1e-3);
    CHECK(p == std::vector<double>{0.5, -1.0, 2.0});
    CHECK(s.step == 1);

    std::vector<double> q{0.0};
    auto s1 = adam_init(1);
    adam_step(q, std::vector<double>{1.0}, s1, 1e-2);
    CHECK(q[0] == Approx(1e-2).epsilon(1e-7));  // ascent: moves with the gradient
    std::vector<double> q2{0.0};
    auto s2 = adam_init(1);
    adam_step(q2, std::vector<double>{-3.0}, s2, 1e-2);
    CHECK(q2[0] == Approx(-1e-2).epsilon(1e-7));

    std::vector<double> a{0.3, 0.4};
    std::vector<double> b = a;
    auto sa = adam_init(2);
    adam_step(a, std::vector<double>{0.1, -0.2}, sa, 1e-3);
    auto sb = adam_init(2);
    adam_step(b, std::vector<double>{0.1, -0.2}, sb, 1e-3);
    const auto sa_copy = sa;
    auto sb_copy = sa;
    std::vector<double> a2 = a;
    adam_step(a, std::vector<double>{0.5, 0.5}, sa, 1e-3);
    adam_step(a2, std::vector<double>{0.5, 0.5}, sb_copy, 1e-3);
    CHECK(a == a2);
    CHECK(sa.m == sb_copy.m);
    CHECK(sa.v == sb_copy.v);
    CHECK(sa.step == sa_copy.step + 1);
}

TEST_CASE("adam_step rejects bad input without side effects", "[nn][adam]") {
    std::vector<double> p{1.0, 2.0};
    auto s = adam_init(2);
    adam_step(p, std::vector<double>{0.3, 0.3}, s, 1e-3);
    const auto p_before = p;
    const auto s_before = s;
    CHECK_THROWS_AS(adam_step(p, std::vector<double>{0.1, std::nan("")}, s, 1e-3), NumericError);
    CHECK(p == p_before);
    CHECK(s.m == s_before.m);
    CHECK(s.v == s_before.v);
    CHECK(s.step == s_before.step);
    CHECK_THROWS_AS(adam_step(p, std::vector<double>{0.1}, s, 1e-3), UsageError);
    CHECK_THROWS_AS(adam_step(p, std::vector<double>{0.1, 0.1}, s, 0.0), UsageError);
}

TEST_CASE("adam ascent converges on a concave quadratic", "[nn][adam]") {
    std::vector<double> p{0.0};
    auto s = adam_init(1);
    int steps = 0;
    for (; steps < 5000; ++steps) {
        const double g = -2.0 * (p[0] - 1.0);  // d/dp of -(p - 1)^2
        adam_step(p, std::vector<double>{g}, s, 1e-2);
    }
    CHECK(std::abs(p[0] - 1.0) < 1e-3);
    CHECK(s.step == 5000);
}

TEST_CASE("backward does not depend on the gradient buffer's address", "[nn][determinism]") {
    const Mlp net = random_net(Head::Investment, 6, {2, 12, 12, 1});
    RowVec t = RowVec::LinSpaced(64, 0.0, 1.0);
    RowVec x = RowVec::LinSpaced(64, 0.1, 2.0);
    MlpCache cache;
    RowVec z;
    net.forward(t, x, cache, z);
    const RowVec zbar = RowVec::LinSpaced(64, -1.0, 1.3);
    const std::size_t n = net.num_params();
    std::vector<double> reference;
    for (std::size_t shift = 0; shift < 8; ++shift) {
        std::vector<double> buf(n + shift, 0.0);
        RowVec xbar;
        // Several accumulations, as over the steps of a rollout.
        for (int k = 0; k < 5; ++k) net.backward(cache, zbar * (1.0 + 0.37 * k), std::span<double>(buf.data() + shift, n), xbar);
        const std::vector<double> g(buf.begin() + static_cast<std::ptrdiff_t>(shift), buf.end());
        if (shift == 0) reference = g;
        CHECK(g == reference);
    }
}

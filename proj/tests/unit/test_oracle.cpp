// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "pgdpo/engine.hpp"
#include "pgdpo/oracle.hpp"

using namespace pgdpo;
using Catch::Approx;

namespace {

double max_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
    double scale = 0.0;
    for (double v : b) scale = std::max(scale, std::abs(v));
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), 1e-3 * scale));
    }
    return worst;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

}  // namespace

TEST_CASE("pathwise costate gradients agree with BPTT", "[oracle]") {
    const MarketParams p;
    const Domain d;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const Mlp pi = mlp_init({2, 6, 6, 1}, Head::Investment, 40 + seed, kDefaultSlope, 1.5);
        const Mlp c = mlp_init({2, 6, 6, 1}, Head::Consumption, 50 + seed, kDefaultSlope, 1.5);
        const auto batch = draw_batch(d, p, 4, 6, CounterRng(seed), 0);
        const auto bptt = evaluate_batch(pi, c, batch, p);
        const auto g = explicit_gradient_oracle(pi, c, batch, p);
        INFO("seed " << seed);
        CHECK(max_rel_err(g.grad_pi, bptt.grad_pi) < 1e-5);
        CHECK(max_rel_err(g.grad_c, bptt.grad_c) < 1e-5);
    }
}

TEST_CASE("single path, single step", "[oracle]") {
    const MarketParams p;
    const Domain d;
    const Mlp pi = mlp_init({2, 4, 1}, Head::Investment, 3, kDefaultSlope, 1.5);
    const Mlp c = mlp_init({2, 4, 1}, Head::Consumption, 4, kDefaultSlope, 1.5);
    const auto batch = draw_batch(d, p, 1, 1, CounterRng(9), 0);
    ad::Tape tape;
    const auto tb = batch_objective(pi, c, batch, p, tape);
    const auto gpi = ad::grad(tb.objective, tb.pi_params);
    const auto gc = ad::grad(tb.objective, tb.c_params);
    const auto g = explicit_gradient_oracle(pi, c, batch, p);
    CHECK(max_rel_err(g.grad_pi, gpi) < 1e-6);
    CHECK(max_rel_err(g.grad_c, gc) < 1e-6);
}

TEST_CASE("no excess return and zero investment give no investment gradient", "[oracle]") {
    MarketParams p;
    p.mu = p.r;
    const Domain d;
    const Mlp pi({2, 5, 1}, Head::Investment);  // zero weights: pi = 0 everywhere
    const Mlp c = mlp_init({2, 5, 1}, Head::Consumption, 8);
    const auto batch = draw_batch(d, p, 5, 8, CounterRng(1), 0);
    const auto g = explicit_gradient_oracle(pi, c, batch, p, OracleForm::Hamiltonian);
    for (double v : g.grad_pi) CHECK(v == 0.0);
    CHECK(std::any_of(g.grad_c.begin(), g.grad_c.end(), [](double v) { return v != 0.0; }));
}

TEST_CASE("oracle refuses large instances", "[oracle][errors]") {
    const MarketParams p;
    const Domain d;
    const Mlp small = mlp_init({2, 4, 1}, Head::Investment, 1);
    const Mlp small_c = mlp_init({2, 4, 1}, Head::Consumption, 2);
    const Mlp wide = mlp_init({2, 200, 200, 1}, Head::Investment, 1);
    CHECK_THROWS_AS(explicit_gradient_oracle(small, small_c, draw_batch(d, p, 9, 5, CounterRng(1), 0), p), UsageError);
    CHECK_THROWS_AS(explicit_gradient_oracle(small, small_c, draw_batch(d, p, 2, 11, CounterRng(1), 0), p), UsageError);
    CHECK_THROWS_AS(explicit_gradient_oracle(wide, small_c, draw_batch(d, p, 2, 5, CounterRng(1), 0), p), UsageError);
}

TEST_CASE("Hamiltonian form agrees with BPTT on average", "[oracle][statistical]") {
    const MarketParams p;
    const Domain d;
    const Mlp pi = mlp_init({2, 6, 6, 1}, Head::Investment, 61, kDefaultSlope, 1.5);
    const Mlp c = mlp_init({2, 6, 6, 1}, Head::Consumption, 62, kDefaultSlope, 1.5);
    std::vector<double> h_pi(pi.num_params(), 0.0), b_pi(pi.num_params(), 0.0);
    std::vector<double> h_c(c.num_params(), 0.0), b_c(c.num_params(), 0.0);
    const int batches = 150;
    for (int k = 0; k < batches; ++k) {
        const auto batch = draw_batch(d, p, 8, 10, CounterRng(1234), static_cast<std::uint32_t>(k));
        const auto h = explicit_gradient_oracle(pi, c, batch, p, OracleForm::Hamiltonian);
        const auto b = evaluate_batch(pi, c, batch, p);
        for (std::size_t q = 0; q < h_pi.size(); ++q) {
            h_pi[q] += h.grad_pi[q];
            b_pi[q] += b.grad_pi[q];
        }
        for (std::size_t q = 0; q < h_c.size(); ++q) {
            h_c[q] += h.grad_c[q];
            b_c[q] += b.grad_c[q];
        }
    }
    const double cos_pi = dot(h_pi, b_pi) / std::sqrt(dot(h_pi, h_pi) * dot(b_pi, b_pi));
    const double cos_c = dot(h_c, b_c) / std::sqrt(dot(h_c, h_c) * dot(b_c, b_c));
    const double ratio_c = std::sqrt(dot(h_c, h_c) / dot(b_c, b_c));
    INFO("cosine pi " << cos_pi << ", cosine c " << cos_c << ", norm ratio c " << ratio_c);
    CHECK(cos_pi > 0.9);
    CHECK(cos_c > 0.9);
    CHECK(ratio_c == Approx(1.0).epsilon(0.25));
}

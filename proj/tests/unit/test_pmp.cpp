// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>

#include "pgdpo/engine.hpp"
#include "pgdpo/eval.hpp"
#include "pgdpo/pmp.hpp"
#include "pgdpo/trainer.hpp"

using namespace pgdpo;
using Catch::Approx;

TEST_CASE("costate of a deterministic bequest-only objective", "[pmp]") {
    const MarketParams p;
    ad::Tape tape;
    const ad::Var x0 = tape.variable(1.0);
    const ad::Var cost = p.kappa * utility(x0 * std::exp(p.r * p.T), p.gamma);
    const auto a = adjoint_at_origin(cost, x0, {0.0, 1.0});
    // lambda0 = kappa U'(x0 e^{rT}) e^{rT}; dlambda0 = kappa U''(x0 e^{rT}) e^{2rT}.
    CHECK(a.lambda0 == Approx(0.01 * std::exp(-0.03)).epsilon(1e-14));
    CHECK(a.lambda0 == Approx(0.0097045).epsilon(1e-5));
    CHECK(a.dlambda0_dx == Approx(0.01 * (-2.0 * std::exp(-0.09)) * std::exp(0.06)).epsilon(1e-14));
    CHECK(a.dlambda0_dx == Approx(-0.0194089).epsilon(1e-5));
}

TEST_CASE("single-path costate matches frozen-noise differences", "[pmp][property]") {
    const MarketParams p;
    const Domain d;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const Mlp pi = mlp_init({2, 8, 8, 1}, Head::Investment, derived_seed(seed, 1));
        const Mlp c = mlp_init({2, 8, 8, 1}, Head::Consumption, derived_seed(seed, 2));
        const auto batch = draw_batch(d, p, 1, 20, CounterRng(seed + 100), 0);
        const InitialNode node = batch.nodes[0];
        std::vector<double> dW(batch.dW.data(), batch.dW.data() + 20);
        ad::Tape tape;
        const auto r = rollout(pi, c, node, dW, p, tape);
        const auto a = adjoint_at_origin(r.cost, r.x0, node);

        auto J = [&](long double dx) {
            PathBatch b = batch;
            b.nodes[0].x0 = static_cast<double>(node.x0 + dx);
            return reference_objective<long double>(pi, pi.params(), c, c.params(), b, p);
        };
        // Power-of-two steps; the second one stays small because leaky-ReLU kinks make
        // the curvature piecewise constant in x0.
        const double h1 = std::ldexp(1.0, -20);
        const double h2 = std::ldexp(1.0, -18);
        const auto fd1 = static_cast<double>((J(h1) - J(-h1)) / (2.0L * h1));
        const auto fd2 = static_cast<double>((J(h2) - 2.0L * J(0) + J(-h2)) / (static_cast<long double>(h2) * h2));
        INFO("seed " << seed << " lambda0 " << a.lambda0 << " fd " << fd1 << " dlambda0 " << a.dlambda0_dx << " fd " << fd2);
        CHECK(std::abs(a.lambda0 - fd1) / std::abs(fd1) < 1e-5);
        CHECK(std::abs(a.dlambda0_dx - fd2) / std::abs(fd2) < 1e-3);
    }
}

TEST_CASE("pmp_controls examples", "[pmp]") {
    const MarketParams p;
    auto u = pmp_controls(0.0, 1.0, 1.0, -1.0, p);
    REQUIRE(u);
    CHECK(u->c_pmp == Approx(1.0).epsilon(1e-15));

    // lambda(x) = x^{-gamma}: lambda / lambda' = -x / gamma recovers the Merton fraction.
    for (double x0 : {0.1, 0.7, 1.9}) {
        const double lambda = std::pow(x0, -p.gamma);
        const double dlambda = -p.gamma * std::pow(x0, -p.gamma - 1.0);
        const auto v = pmp_controls(0.3, x0, lambda, dlambda, p);
        REQUIRE(v);
        CHECK(v->pi_pmp == Approx(1.125).epsilon(1e-14));
    }

    for (double c : {0.05, 0.9, 3.0}) {
        for (double t0 : {0.0, 0.6}) {
            const double lambda = std::exp(-p.rho * t0) * std::pow(c, -p.gamma);
            const auto w = pmp_controls(t0, 1.0, lambda, -1.0, p);
            REQUIRE(w);
            CHECK(w->c_pmp == Approx(c).epsilon(1e-14));
        }
    }
}

TEST_CASE("pmp_controls is undefined for degenerate costates", "[pmp][errors]") {
    const MarketParams p;
    CHECK_FALSE(pmp_controls(0.0, 1.0, 0.0, -1.0, p));
    CHECK_FALSE(pmp_controls(0.0, 1.0, -0.5, -1.0, p));
    CHECK_FALSE(pmp_controls(0.0, 1.0, 1.0, 0.0, p));
    CHECK_FALSE(pmp_controls(0.0, 1.0, 1.0, 5e-13, p));
    CHECK_FALSE(pmp_controls(0.0, 1.0, std::nan(""), -1.0, p));
    CHECK_FALSE(pmp_controls(0.0, 1.0, 1.0, INFINITY, p));
    CHECK(pmp_controls(0.0, 1.0, 1.0, 2e-12, p));
}

TEST_CASE("alignment penalty", "[pmp]") {
    const PmpControls target{0.8, 1.1};
    CHECK(alignment_penalty(0.8, 1.1, target, 1e-3, 1e-1) == 0.0);
    CHECK(alignment_penalty(3.0, -2.0, target, 0.0, 0.0) == 0.0);
    CHECK(alignment_penalty(1.3, 1.2, target, 1e-3, 1e-1) == Approx(1.05e-2).epsilon(1e-12));
    CHECK(alignment_penalty(0.3, 1.0, target, 1e-3, 1e-1) == Approx(1.05e-2).epsilon(1e-12));
    CHECK_THROWS_AS(alignment_penalty(1.0, 1.0, target, -1e-3, 0.1), UsageError);

    // Targets are constants: the gradient is alpha times the sign of the gap.
    ad::Tape tape;
    const ad::Var c = tape.variable(1.3);
    const ad::Var pi = tape.variable(1.0);
    const ad::Var pen = alignment_penalty(c, pi, target, 1e-3, 1e-1);
    CHECK(pen.value() == Approx(0.5e-3 + 0.1e-1).epsilon(1e-12));
    const std::vector<ad::Var> in{c, pi};
    const auto g = ad::grad(pen, in);
    CHECK(g[0] == Approx(1e-3));
    CHECK(g[1] == Approx(-1e-1));
    CHECK_THROWS_AS(alignment_penalty(c, pi, target, 1e-3, -1.0), UsageError);
}

TEST_CASE("regularized objective on the tape", "[pmp]") {
    const MarketParams p;
    const Domain d;
    const Mlp pi = mlp_init({2, 6, 6, 1}, Head::Investment, 31);
    const Mlp c = mlp_init({2, 6, 6, 1}, Head::Consumption, 32);
    const auto batch = draw_batch(d, p, 6, 8, CounterRng(4), 0);

    ad::Tape tape;
    const auto tb = batch_objective(pi, c, batch, p, tape);
    const auto off = regularized_objective(tb, p, 0.0, 0.0);
    CHECK(off.objective.value() == tb.objective.value());
    CHECK(off.adjoints.size() == 6);

    const auto on = regularized_objective(tb, p, 1e-3, 1e-1);
    double pen = 0.0;
    int valid = 0;
    for (std::size_t i = 0; i < on.targets.size(); ++i) {
        if (!on.targets[i]) continue;
        ++valid;
        pen += alignment_penalty(tb.paths[i].c_policy.front().value(), tb.paths[i].pi.front().value(), *on.targets[i],
                                 1e-3, 1e-1);
    }
    CHECK(on.objective.value() == Approx(tb.objective.value() - pen / 6.0).epsilon(1e-14));
    CHECK(on.excluded_frac == Approx(1.0 - valid / 6.0));
}

TEST_CASE("closed-form policies: costates recover the Merton controls", "[pmp][slow]") {
    const MarketParams p;
    const Domain d;
    const AnalyticPolicy pi(Head::Investment, p);
    const AnalyticPolicy c(Head::Consumption, p);
    const auto batch = draw_batch(d, p, 10000, 100, CounterRng(2024), 0);
    BatchEvalOptions o;
    o.need_grad = false;
    o.need_adjoint = true;
    const auto r = evaluate_batch(pi, c, batch, p, o);

    double pi_sum = 0.0;
    double c_sum = 0.0;
    double c_ref = 0.0;
    double lam = 0.0;
    double dlam = 0.0;
    int valid = 0;
    for (int i = 0; i < batch.size(); ++i) {
        lam += r.lambda0[i];
        dlam += r.dlambda0[i];
        if (!r.targets[i]) continue;
        ++valid;
        pi_sum += r.targets[i]->pi_pmp;
        c_sum += r.targets[i]->c_pmp;
        c_ref += closed_form_consumption(p, batch.nodes[i].t0, batch.nodes[i].x0);
    }
    REQUIRE(valid > 9000);
    const double pi_mean = pi_sum / valid;
    INFO("mean pi_pmp " << pi_mean << ", mean c_pmp " << c_sum / valid << " vs " << c_ref / valid);
    CHECK(pi_mean >= 0.9);
    CHECK(pi_mean <= 1.35);
    CHECK(std::abs(c_sum / c_ref - 1.0) <= 0.2);
    CHECK(lam > 0.0);
    CHECK(dlam < 0.0);
}

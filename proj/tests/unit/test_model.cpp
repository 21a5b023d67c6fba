// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "pgdpo/model.hpp"

using namespace pgdpo;
using Catch::Approx;

TEST_CASE("utility and marginal utility examples", "[model]") {
    CHECK(utility(1.0, 2.0) == -1.0);
    CHECK(utility(2.0, 2.0) == -0.5);
    CHECK(utility(4.0, 0.5) == Approx(4.0).epsilon(1e-15));
    CHECK(utility_prime(2.0, 2.0) == 0.25);
    CHECK(utility_prime(1.0, 2.0) == 1.0);
    CHECK(utility_prime(0.5, 3.0) == Approx(8.0).epsilon(1e-15));
    CHECK_THROWS_AS(utility(0.0, 2.0), DomainError);
    CHECK_THROWS_AS(utility(-1.0, 2.0), DomainError);
    CHECK_THROWS_AS(utility_prime(0.0, 2.0), DomainError);
}

TEST_CASE("utility is increasing and strictly concave", "[model][property]") {
    std::mt19937_64 gen(1);
    std::uniform_real_distribution<double> cd(1e-3, 10.0);
    for (double gamma : {0.5, 2.0, 3.5}) {
        for (int i = 0; i < 2000; ++i) {
            double a = cd(gen);
            double b = cd(gen);
            if (a == b) continue;
            if (a > b) std::swap(a, b);
            REQUIRE(utility(a, gamma) < utility(b, gamma));
            REQUIRE(utility(0.5 * (a + b), gamma) > 0.5 * (utility(a, gamma) + utility(b, gamma)));
        }
    }
}

TEST_CASE("utility_prime matches a finite difference of utility", "[model][property]") {
    for (double gamma : {0.5, 2.0, 4.0}) {
        for (double c : {0.05, 0.3, 1.0, 2.5, 9.0}) {
            const long double h = 1e-6L * c;
            const long double cl = c;
            const long double g = gamma;
            auto u = [&](long double x) { return std::pow(x, 1 - g) / (1 - g); };
            const auto fd = static_cast<double>((u(cl + h) - u(cl - h)) / (2 * h));
            CHECK(std::abs(utility_prime(c, gamma) - fd) / fd < 1e-8);
        }
    }
}

namespace {

/// Distance in units in the last place.
double ulps(double a, double b) {
    const double ulp = std::nextafter(std::abs(b), INFINITY) - std::abs(b);
    return std::abs(a - b) / ulp;
}

}  // namespace

TEST_CASE("closed-form investment fraction", "[model]") {
    const MarketParams p;
    // 0.12, 0.03 and 0.2 are not binary fractions, so the last place can differ.
    CHECK(ulps(closed_form_pi(p), 1.125) <= 1.0);
    MarketParams flat = p;
    flat.mu = flat.r;
    CHECK(closed_form_pi(flat) == 0.0);

    MarketParams averse = p;
    averse.gamma = 1e6;
    CHECK(closed_form_pi(averse) == Approx(2.25e-6).epsilon(1e-12));
    double prev = closed_form_pi(p);
    for (double g : {2.5, 3.0, 5.0, 10.0, 100.0}) {
        MarketParams q = p;
        q.gamma = g;
        CHECK(closed_form_pi(q) < prev);
        prev = closed_form_pi(q);
    }
}

TEST_CASE("closed-form consumption rate nu", "[model]") {
    const MarketParams p;
    CHECK(ulps(closed_form_nu(p), 0.0503125) <= 1.0);
    MarketParams q = p;
    q.rho += 0.01;
    CHECK(closed_form_nu(q) - closed_form_nu(p) == Approx(0.01 / p.gamma).epsilon(1e-12));
}

TEST_CASE("bequest weight from epsilon", "[model]") {
    CHECK(kappa_from_epsilon(0.1, 2.0) == Approx(0.01).epsilon(1e-15));
    CHECK(kappa_from_epsilon(1.0, 2.0) == 1.0);
    CHECK(kappa_from_epsilon(1.0, 7.3) == 1.0);
    CHECK_THROWS_AS(kappa_from_epsilon(0.0, 2.0), DomainError);
}

TEST_CASE("closed-form consumption", "[model]") {
    const MarketParams p;
    const double eps = std::sqrt(p.kappa);
    for (double x : {0.1, 1.0, 1.7}) {
        CHECK(closed_form_consumption(p, p.T, x) == Approx(x / eps).epsilon(4 * std::numeric_limits<double>::epsilon()));
        CHECK(closed_form_consumption(p, p.T, x) == Approx(10.0 * x).epsilon(4 * std::numeric_limits<double>::epsilon()));
    }

    // Direct extended-precision evaluation at t = 0, x = 1.
    const long double nu = 0.0503125L;
    const long double ref = nu / (1.0L + (nu * 0.1L - 1.0L) * std::exp(-nu));
    CHECK(closed_form_consumption(p, 0.0, 1.0) == Approx(static_cast<double>(ref)).epsilon(1e-14));
    CHECK(closed_form_consumption(p, 0.0, 1.0) == Approx(0.9345).epsilon(1e-3));

    for (double t : {0.0, 0.3, 0.99}) {
        CHECK(closed_form_consumption(p, t, 2.0 * 0.8) == Approx(2.0 * closed_form_consumption(p, t, 0.8)).epsilon(1e-15));
    }

    CHECK_THROWS_AS(closed_form_consumption(p, -0.1, 1.0), DomainError);
    CHECK_THROWS_AS(closed_form_consumption(p, 0.5, 0.0), DomainError);
    MarketParams no_bequest = p;
    no_bequest.kappa = 0.0;
    CHECK_THROWS_AS(closed_form_consumption(no_bequest, 0.5, 1.0), DomainError);
}

TEST_CASE("long horizons approach the infinite-horizon rate", "[model]") {
    MarketParams p;
    p.T = 1e4;
    const double nu = closed_form_nu(p);
    const double rate = closed_form_consumption(p, 0.0, 1.0);
    CHECK(std::abs(rate - nu) / nu < 1e-6);
}

TEST_CASE("parameter validation names the field", "[model][errors]") {
    MarketParams p;
    CHECK_NOTHROW(p.validate());
    p.gamma = 1.0;
    CHECK_THROWS_WITH(p.validate(), Catch::Matchers::ContainsSubstring("gamma"));
    p = {};
    p.sigma = 0.0;
    CHECK_THROWS_WITH(p.validate(), Catch::Matchers::ContainsSubstring("sigma"));
    p = {};
    p.kappa = -1.0;
    CHECK_THROWS_WITH(p.validate(), Catch::Matchers::ContainsSubstring("kappa"));
    p = {};
    p.rho = -0.1;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p = {};
    p.T = 0.0;
    CHECK_THROWS_AS(p.validate(), ConfigError);

    MarketParams flat;
    flat.mu = flat.r;
    CHECK_NOTHROW(flat.validate());
    CHECK(flat.warnings().size() == 1);
    CHECK(MarketParams{}.warnings().empty());

    Domain d;
    CHECK_NOTHROW(d.validate(1.0));
    d.x_min = 0.0;
    CHECK_THROWS_WITH(d.validate(1.0), Catch::Matchers::ContainsSubstring("x_min"));
    d = {};
    d.t_max = 2.0;
    CHECK_THROWS_AS(d.validate(1.0), ConfigError);
}

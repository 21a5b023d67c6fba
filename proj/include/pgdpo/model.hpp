// SPDX-License-Identifier: Apache-2.0
#pragma once

// Merton consumption-investment market: parameters, CRRA utility and the
// closed-form benchmark policies.

#include <cmath>
#include <string>
#include <vector>

#include "pgdpo/errors.hpp"

namespace pgdpo {

/// Market and preference constants. Rates are per year, sigma per sqrt(year).
struct MarketParams {
    double r = 0.03;
    double mu = 0.12;
    double sigma = 0.2;
    double rho = 0.02;
    double gamma = 2.0;
    double kappa = 0.01;  // bequest weight; epsilon = kappa^(1/gamma) = 0.1
    double T = 1.0;

    /// Throws ConfigError naming the first violated field.
    void validate() const {
        if (!std::isfinite(r)) throw ConfigError("market.r must be finite");
        if (!std::isfinite(mu)) throw ConfigError("market.mu must be finite");
        if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("market.sigma must be > 0");
        if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("market.gamma must be > 0");
        if (gamma == 1.0) throw ConfigError("market.gamma must differ from 1 (log utility is not supported)");
        if (!(T > 0.0) || !std::isfinite(T)) throw ConfigError("market.T must be > 0");
        if (!(kappa >= 0.0) || !std::isfinite(kappa)) throw ConfigError("market.kappa must be >= 0");
        if (!(rho >= 0.0) || !std::isfinite(rho)) throw ConfigError("market.rho must be >= 0");
    }

    /// Non-fatal remarks about unusual but valid parameter sets.
    std::vector<std::string> warnings() const {
        std::vector<std::string> w;
        if (!(mu > r)) w.emplace_back("market.mu <= market.r: no excess return, optimal risky fraction is <= 0");
        return w;
    }
};

/// Rectangle of initial nodes (t0, x0).
struct Domain {
    double t_min = 0.0;
    double t_max = 1.0;
    double x_min = 0.1;
    double x_max = 2.0;

    void validate(double horizon) const {
        if (!(t_min >= 0.0)) throw ConfigError("domain.t_min must be >= 0");
        if (!(t_max <= horizon)) throw ConfigError("domain.t_max must be <= market.T");
        if (!(t_min <= t_max)) throw ConfigError("domain.t_min must be <= domain.t_max");
        if (!(x_min > 0.0)) throw ConfigError("domain.x_min must be > 0");
        if (!(x_min <= x_max)) throw ConfigError("domain.x_min must be <= domain.x_max");
    }
};

/// CRRA utility c^(1-gamma) / (1-gamma).
inline double utility(double c, double gamma) {
    if (!(c > 0.0)) throw DomainError("utility: consumption must be > 0");
    return std::pow(c, 1.0 - gamma) / (1.0 - gamma);
}

inline double utility_prime(double c, double gamma) {
    if (!(c > 0.0)) throw DomainError("utility_prime: consumption must be > 0");
    return std::pow(c, -gamma);
}

/// Optimal constant risky fraction (mu - r) / (gamma sigma^2).
inline double closed_form_pi(const MarketParams& p) {
    return (p.mu - p.r) / (p.gamma * p.sigma * p.sigma);
}

/// Infinite-horizon consumption rate nu.
inline double closed_form_nu(const MarketParams& p) {
    const double excess = p.mu - p.r;
    const double growth = excess * excess / (2.0 * p.sigma * p.sigma * p.gamma) + p.r;
    return (p.rho - (1.0 - p.gamma) * growth) / p.gamma;
}

inline double kappa_from_epsilon(double epsilon, double gamma) {
    if (!(epsilon > 0.0)) throw DomainError("kappa_from_epsilon: epsilon must be > 0");
    return std::pow(epsilon, gamma);
}

/// Finite-horizon optimal consumption rate c(t, x) / x.
inline double closed_form_consumption_rate(const MarketParams& p, double t) {
    if (!(p.kappa > 0.0)) throw DomainError("closed_form_consumption: requires kappa > 0");
    const double nu = closed_form_nu(p);
    const double eps = std::pow(p.kappa, 1.0 / p.gamma);
    // 1 + (nu eps - 1) e^{-nu tau}, arranged so that tau = 0 gives nu eps without cancellation.
    const double tau = p.T - t;
    const double denom = -std::expm1(-nu * tau) + nu * eps * std::exp(-nu * tau);
    if (!(denom > 0.0)) throw NumericError("closed_form_consumption: non-positive denominator");
    return nu / denom;
}

/// Finite-horizon optimal consumption nu (1 + (nu eps - 1) e^{-nu (T - t)})^{-1} x.
inline double closed_form_consumption(const MarketParams& p, double t, double x) {
    if (!(t >= 0.0 && t <= p.T)) throw DomainError("closed_form_consumption: t outside [0, T]");
    if (!(x > 0.0)) throw DomainError("closed_form_consumption: wealth must be > 0");
    return closed_form_consumption_rate(p, t) * x;
}

}  // namespace pgdpo

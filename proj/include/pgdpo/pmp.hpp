// SPDX-License-Identifier: Apache-2.0
#pragma once

// Costate extraction at a path's initial node and the controls the maximum
// principle implies from it, plus the L1 alignment penalty.

#include <cmath>
#include <optional>
#include <span>

#include "pgdpo/autodiff.hpp"
#include "pgdpo/errors.hpp"
#include "pgdpo/model.hpp"
#include "pgdpo/sim.hpp"

namespace pgdpo {

/// lambda0 = dJ/dx0 and dlambda0_dx = d^2J/dx0^2 for one path.
struct AdjointEstimate {
    double lambda0 = 0.0;
    double dlambda0_dx = 0.0;
    InitialNode node;
};

struct PmpControls {
    double c_pmp = 0.0;
    double pi_pmp = 0.0;
};

inline constexpr double kMinCurvature = 1e-12;

/// Two reverse sweeps over the recorded path: the first is itself taped so the
/// second can differentiate it.
inline AdjointEstimate adjoint_at_origin(ad::Var cost, ad::Var x0, InitialNode node) {
    const ad::Var lambda = ad::grad_as_var(cost, x0);
    AdjointEstimate a;
    a.lambda0 = lambda.value();
    a.dlambda0_dx = ad::grad(lambda, x0);
    a.node = node;
    return a;
}

inline bool pmp_defined(double lambda0, double dlambda0_dx) {
    return std::isfinite(lambda0) && std::isfinite(dlambda0_dx) && lambda0 > 0.0 &&
           std::abs(dlambda0_dx) >= kMinCurvature;
}

/// c = (e^{rho t0} lambda0)^{-1/gamma}, pi = -(mu - r) / (sigma^2 x0) * lambda0 / dlambda0_dx.
/// Empty when the costate does not determine the controls.
inline std::optional<PmpControls> pmp_controls(double t0, double x0, double lambda0, double dlambda0_dx,
                                               const MarketParams& p) {
    if (!pmp_defined(lambda0, dlambda0_dx) || !(x0 > 0.0)) return std::nullopt;
    PmpControls out;
    out.c_pmp = std::pow(std::exp(p.rho * t0) * lambda0, -1.0 / p.gamma);
    out.pi_pmp = -((p.mu - p.r) / (p.sigma * p.sigma * x0)) * (lambda0 / dlambda0_dx);
    if (!std::isfinite(out.c_pmp) || !(out.c_pmp > 0.0) || !std::isfinite(out.pi_pmp)) return std::nullopt;
    return out;
}

inline std::optional<PmpControls> pmp_controls(const AdjointEstimate& a, const MarketParams& p) {
    return pmp_controls(a.node.t0, a.node.x0, a.lambda0, a.dlambda0_dx, p);
}

inline double alignment_penalty(double c_policy, double pi_policy, const PmpControls& target, double alpha_c,
                                double alpha_pi) {
    if (!(alpha_c >= 0.0 && alpha_pi >= 0.0)) throw UsageError("alignment_penalty: weights must be >= 0");
    return alpha_c * std::abs(c_policy - target.c_pmp) + alpha_pi * std::abs(pi_policy - target.pi_pmp);
}

/// Targets enter as constants, so no gradient flows through them.
inline ad::Var alignment_penalty(ad::Var c_policy, ad::Var pi_policy, const PmpControls& target, double alpha_c,
                                 double alpha_pi) {
    if (!(alpha_c >= 0.0 && alpha_pi >= 0.0)) throw UsageError("alignment_penalty: weights must be >= 0");
    return alpha_c * ad::abs(c_policy - target.c_pmp) + alpha_pi * ad::abs(pi_policy - target.pi_pmp);
}

/// Tape form of the regularized batch objective
///   (1/M) sum_i [J_i - 1{valid_i} (alpha_c |c0_i - c_pmp_i| + alpha_pi |pi0_i - pi_pmp_i|)].
struct TapeRegObjective {
    ad::Var objective;
    std::vector<std::optional<PmpControls>> targets;
    std::vector<AdjointEstimate> adjoints;
    double penalty_mean = 0.0;  // over valid paths
    double excluded_frac = 0.0;
};

inline TapeRegObjective regularized_objective(const TapeBatch& b, const MarketParams& p, double alpha_c,
                                              double alpha_pi) {
    if (b.paths.empty()) throw UsageError("regularized_objective: empty batch");
    ad::Tape& tape = *b.objective.tape();
    TapeRegObjective out;
    ad::Var pen_sum = tape.constant(0.0);
    double pen_valid = 0.0;
    std::size_t valid = 0;
    for (const auto& path : b.paths) {
        const InitialNode node{path.times.front(), path.x0.value()};
        const auto a = adjoint_at_origin(path.cost, path.x0, node);
        const auto target = pmp_controls(a, p);
        out.adjoints.push_back(a);
        out.targets.push_back(target);
        if (!target) continue;
        const ad::Var pen = alignment_penalty(path.c_policy.front(), path.pi.front(), *target, alpha_c, alpha_pi);
        pen_valid += pen.value();
        ++valid;
        pen_sum = pen_sum + pen;
    }
    const auto m = static_cast<double>(b.paths.size());
    out.objective = b.objective - pen_sum / m;
    out.penalty_mean = valid > 0 ? pen_valid / static_cast<double>(valid) : 0.0;
    out.excluded_frac = 1.0 - static_cast<double>(valid) / m;
    return out;
}

}  // namespace pgdpo

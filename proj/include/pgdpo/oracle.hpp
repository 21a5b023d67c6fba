// SPDX-License-Identifier: Apache-2.0
#pragma once

// Parameter gradients assembled from costates instead of a single reverse
// sweep. Every per-step costate is obtained by re-simulating the remainder of
// the path from that step with the state as a fresh leaf, so the cost grows
// quadratically in N; this exists to cross-check BPTT on small instances.

#include <cmath>
#include <span>
#include <vector>

#include "pgdpo/autodiff.hpp"
#include "pgdpo/errors.hpp"
#include "pgdpo/model.hpp"
#include "pgdpo/nn.hpp"
#include "pgdpo/sim.hpp"

namespace pgdpo {

enum class OracleForm {
    /// Exact for the discretized problem under frozen noise:
    ///   dJ/dtheta = sum_k lambda_{k+1} f'(y_k) [(mu - r) X_k dt + sigma X_k dW_k] dpi_k/dtheta
    ///   dJ/dphi   = sum_k [e^{-rho t_k} U'(C_k) - lambda_{k+1} f'(y_k)] dt dC_k/dphi
    /// where f is the wealth floor and y_k the pre-floor wealth.
    Pathwise,
    /// Hamiltonian form with Z_k = sigma pi_k X_k dlambda_k/dx:
    ///   dJ/dtheta = sum_k [lambda_k (mu - r) X_k + Z_k sigma X_k] dt dpi_k/dtheta
    ///   dJ/dphi   = sum_k [e^{-rho t_k} U'(C_k) - lambda_k] dt dC_k/dphi
    /// It agrees with BPTT only in expectation and as dt -> 0.
    Hamiltonian,
};

struct OracleLimits {
    int max_paths = 8;
    int max_steps = 10;
    int max_width = 8;
};

struct OracleGradient {
    std::vector<double> grad_pi;
    std::vector<double> grad_c;
};

namespace detail {

/// d control / d params at a fixed (t, x), on a throwaway tape.
template <Policy P>
std::vector<double> control_param_grad(const P& net, double t, double x) {
    if (net.num_params() == 0) return {};
    ad::Tape tape;
    const auto pv = net.register_params(tape);
    const ad::Var u = apply_head(net.head(), net.raw(pv, t, tape.variable(x)), tape.constant(x));
    return ad::grad(u, pv);
}

}  // namespace detail

template <Policy PiP, Policy CP>
OracleGradient explicit_gradient_oracle(const PiP& pi_net, const CP& c_net, const PathBatch& batch,
                                        const MarketParams& p, OracleForm form = OracleForm::Pathwise,
                                        const OracleLimits& limits = {}, const SimOptions& so = {}) {
    if (batch.size() > limits.max_paths || batch.steps() > limits.max_steps) {
        throw UsageError("explicit_gradient_oracle: instance too large (limits " + std::to_string(limits.max_paths) +
                         " paths, " + std::to_string(limits.max_steps) + " steps)");
    }
    auto check_width = [&](const auto& net) {
        if constexpr (requires { net.layer_sizes(); }) {
            for (int s : net.layer_sizes()) {
                if (s > limits.max_width) throw UsageError("explicit_gradient_oracle: network too wide");
            }
        }
    };
    check_width(pi_net);
    check_width(c_net);

    OracleGradient g;
    g.grad_pi.assign(pi_net.num_params(), 0.0);
    g.grad_c.assign(c_net.num_params(), 0.0);
    const double w = 1.0 / batch.size();
    const int steps = batch.steps();

    for (int i = 0; i < batch.size(); ++i) {
        const InitialNode node = batch.nodes[static_cast<std::size_t>(i)];
        const double dt = step_size(p, node.t0, steps);
        std::vector<double> dW(static_cast<std::size_t>(steps));
        for (int k = 0; k < steps; ++k) dW[static_cast<std::size_t>(k)] = batch.dW(k, i);

        // Reference trajectory.
        ad::Tape ref_tape;
        const auto ref = rollout(pi_net, c_net, node, dW, p, ref_tape, {}, {}, so);

        // Costate of the cost-to-go from step j, state X_j as a leaf.
        auto costate = [&](int j, bool second) {
            ad::Tape tape;
            const ad::Var xj = tape.variable(ref.wealth[static_cast<std::size_t>(j)].value());
            const std::span<const double> rest(dW.data() + j, dW.size() - static_cast<std::size_t>(j));
            ad::Var cost = tape.constant(0.0);
            if (rest.empty()) {
                cost = (p.kappa * std::exp(-p.rho * p.T)) * utility(xj, p.gamma);
            } else {
                cost = rollout_from(pi_net, c_net, node.t0 + j * dt, xj, dt, rest, p, tape, {}, {}, so).cost;
            }
            if (!second) return std::pair<double, double>{ad::grad(cost, xj), 0.0};
            const ad::Var lam = ad::grad_as_var(cost, xj);
            return std::pair<double, double>{lam.value(), ad::grad(lam, xj)};
        };

        for (int k = 0; k < steps; ++k) {
            const auto ks = static_cast<std::size_t>(k);
            const double t = ref.times[ks];
            const double x = ref.wealth[ks].value();
            const double pi = ref.pi[ks].value();
            const double c = ref.c[ks].value();
            const bool capped = ref.c_policy[ks].value() != c;
            const double marginal_u = std::exp(-p.rho * t) * std::pow(c, -p.gamma);

            double coef_pi = 0.0;
            double coef_c = 0.0;
            if (form == OracleForm::Pathwise) {
                const double lam_next = costate(k + 1, false).first;
                const double y = x + dt * (p.r * x + (p.mu - p.r) * pi * x - c) + p.sigma * pi * x * dW[ks];
                const double floor_slope = ad::sigmoid((y - so.wealth_floor) / so.floor_sharpness);
                const double lam = lam_next * floor_slope;
                coef_pi = lam * ((p.mu - p.r) * x * dt + p.sigma * x * dW[ks]);
                coef_c = (marginal_u - lam) * dt;
            } else {
                const auto [lam, dlam] = costate(k, true);
                const double z = p.sigma * pi * x * dlam;
                coef_pi = (lam * (p.mu - p.r) * x + z * p.sigma * x) * dt;
                coef_c = (marginal_u - lam) * dt;
            }

            const auto dpi = detail::control_param_grad(pi_net, t, x);
            for (std::size_t q = 0; q < dpi.size(); ++q) g.grad_pi[q] += w * coef_pi * dpi[q];
            if (!capped) {
                const auto dc = detail::control_param_grad(c_net, t, x);
                for (std::size_t q = 0; q < dc.size(); ++q) g.grad_c[q] += w * coef_c * dc[q];
            }
        }
    }
    return g;
}

}  // namespace pgdpo

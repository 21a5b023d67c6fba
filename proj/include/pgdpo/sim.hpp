// SPDX-License-Identifier: Apache-2.0
#pragma once

// Extended-value-function sampling and Euler-Maruyama rollouts recorded on an
// autodiff tape. Each path starts at a random node (t0, x0) and takes N equal
// steps of size (T - t0) / N to the horizon.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pgdpo/autodiff.hpp"
#include "pgdpo/errors.hpp"
#include "pgdpo/model.hpp"
#include "pgdpo/nn.hpp"
#include "pgdpo/rng.hpp"

namespace pgdpo {

struct InitialNode {
    double t0 = 0.0;
    double x0 = 1.0;
};

/// Numerical guards for the discretized dynamics.
struct SimOptions {
    double wealth_floor = 1e-6;
    double floor_sharpness = 1e-6;
    double consumption_cap = 0.99;  // c <= cap * X / dt
};

/// floor + s * softplus((x - floor) / s): a differentiable max(x, floor).
inline double smooth_floor(double x, const SimOptions& o) {
    return o.wealth_floor + o.floor_sharpness * ad::softplus((x - o.wealth_floor) / o.floor_sharpness);
}

inline ad::Var smooth_floor(ad::Var x, const SimOptions& o) {
    return o.wealth_floor + o.floor_sharpness * ad::softplus((x - o.wealth_floor) / o.floor_sharpness);
}

/// Uniform on [t_min, t_max) x [x_min, x_max); a pure function of the key.
inline InitialNode sample_initial_node(const Domain& d, const CounterRng& rng, std::uint32_t iteration,
                                       std::uint32_t path, Stream stream = Stream::Node) {
    const auto u = rng.uniform2(iteration, path, 0, stream);
    return {d.t_min + u[0] * (d.t_max - d.t_min), d.x_min + u[1] * (d.x_max - d.x_min)};
}

inline double step_size(const MarketParams& p, double t0, int steps) { return (p.T - t0) / steps; }

/// Noise for a batch of paths, frozen once drawn.
struct PathBatch {
    std::vector<InitialNode> nodes;
    Mat dW;  // steps x paths, column i ~ N(0, dt_i) per entry

    int steps() const { return static_cast<int>(dW.rows()); }
    int size() const { return static_cast<int>(nodes.size()); }
};

inline PathBatch draw_batch(const Domain& d, const MarketParams& p, int paths, int steps, const CounterRng& rng,
                            std::uint32_t iteration, Stream node_stream = Stream::Node,
                            Stream noise_stream = Stream::Brownian) {
    if (paths < 1) throw UsageError("draw_batch: need at least one path");
    if (steps < 1) throw UsageError("draw_batch: need at least one step");
    PathBatch b;
    b.nodes.reserve(paths);
    b.dW.resize(steps, paths);
    for (int i = 0; i < paths; ++i) {
        const auto node = sample_initial_node(d, rng, iteration, static_cast<std::uint32_t>(i), node_stream);
        if (!(node.t0 < p.T)) throw UsageError("draw_batch: initial time must be < T");
        b.nodes.push_back(node);
        const double sd = std::sqrt(step_size(p, node.t0, steps));
        for (int k = 0; k < steps; ++k) {
            b.dW(k, i) = sd * rng.normal(iteration, static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(k + 1),
                                         noise_stream);
        }
    }
    return b;
}

/// One Euler-Maruyama step x + [r x + pi (mu - r) x - c] dt + sigma pi x dW,
/// followed by the smooth wealth floor.
inline ad::Var euler_step(ad::Var x, double /*t*/, ad::Var pi, ad::Var c, double dt, double dW, const MarketParams& p,
                          const SimOptions& o = {}) {
    if (!(dt > 0.0)) throw UsageError("euler_step: dt must be > 0");
    const ad::Var drift = p.r * x + (p.mu - p.r) * (pi * x) - c;
    const ad::Var next = x + dt * drift + (p.sigma * dW) * (pi * x);
    if (!std::isfinite(next.value())) throw NumericError("euler_step: non-finite wealth");
    return smooth_floor(next, o);
}

inline ad::Var utility(ad::Var c, double gamma) {
    if (!(c.value() > 0.0)) throw DomainError("utility: consumption must be > 0");
    return ad::pow(c, 1.0 - gamma) / (1.0 - gamma);
}

/// Consumption actually withdrawn in a step: min(c, cap * x / dt).
inline ad::Var capped_consumption(ad::Var c, ad::Var x, double dt, const SimOptions& o) {
    const ad::Var cap = (o.consumption_cap / dt) * x;
    return c.value() > cap.value() ? cap : c;
}

/// Everything a tape rollout records, for inspection and adjoint extraction.
struct TapeRollout {
    ad::Var x0;
    ad::Var cost;
    std::vector<ad::Var> wealth;  // X_0 .. X_N
    std::vector<ad::Var> pi;      // pi_0 .. pi_{N-1}
    std::vector<ad::Var> c;       // consumption actually used, c_0 .. c_{N-1}
    std::vector<ad::Var> c_policy;  // network output before the cap
    std::vector<double> times;    // t_0 .. t_{N-1}
    double dt = 0.0;
};

/// Cost-to-go J = sum_k e^{-rho t_k} U(c_k) dt + kappa e^{-rho T} U(X_N) from
/// (t_start, x_start) with the given frozen increments (one per remaining step).
/// Wealth enters as a differentiable leaf.
template <Policy PiP, Policy CP>
TapeRollout rollout_from(const PiP& pi_net, const CP& c_net, double t_start, ad::Var x_start, double dt,
                         std::span<const double> dW, const MarketParams& p, ad::Tape& tape,
                         std::span<const ad::Var> pi_params = {}, std::span<const ad::Var> c_params = {},
                         const SimOptions& o = {}) {
    std::vector<ad::Var> own_pi;
    std::vector<ad::Var> own_c;
    if (pi_params.empty() && pi_net.num_params() > 0) {
        own_pi = pi_net.register_params(tape);
        pi_params = own_pi;
    }
    if (c_params.empty() && c_net.num_params() > 0) {
        own_c = c_net.register_params(tape);
        c_params = own_c;
    }

    TapeRollout out;
    out.x0 = x_start;
    out.dt = dt;
    out.wealth.push_back(x_start);
    ad::Var cost = tape.constant(0.0);
    ad::Var x = x_start;
    const int steps = static_cast<int>(dW.size());
    for (int k = 0; k < steps; ++k) {
        const double t = t_start + k * dt;
        const ad::Var pi = policy_eval(pi_net, t, x, tape, pi_params);
        const ad::Var c_policy = policy_eval(c_net, t, x, tape, c_params);
        const ad::Var c = capped_consumption(c_policy, x, dt, o);
        cost = cost + (std::exp(-p.rho * t) * dt) * utility(c, p.gamma);
        x = euler_step(x, t, pi, c, dt, dW[k], p, o);
        out.pi.push_back(pi);
        out.c.push_back(c);
        out.c_policy.push_back(c_policy);
        out.times.push_back(t);
        out.wealth.push_back(x);
    }
    cost = cost + (p.kappa * std::exp(-p.rho * p.T)) * utility(x, p.gamma);
    if (!std::isfinite(cost.value())) throw NumericError("rollout: non-finite path cost");
    out.cost = cost;
    return out;
}

/// Path cost J^(i) from an initial node, x0 registered as a leaf.
template <Policy PiP, Policy CP>
TapeRollout rollout(const PiP& pi_net, const CP& c_net, InitialNode node, std::span<const double> dW,
                    const MarketParams& p, ad::Tape& tape, std::span<const ad::Var> pi_params = {},
                    std::span<const ad::Var> c_params = {}, const SimOptions& o = {}) {
    if (dW.empty()) throw UsageError("rollout: need N >= 1");
    if (!(node.t0 < p.T)) throw UsageError("rollout: t0 must be < T");
    const double dt = step_size(p, node.t0, static_cast<int>(dW.size()));
    return rollout_from(pi_net, c_net, node.t0, tape.variable(node.x0), dt, dW, p, tape, pi_params, c_params, o);
}

/// Same, drawing the path's increments from the counter RNG.
template <Policy PiP, Policy CP>
TapeRollout rollout(const PiP& pi_net, const CP& c_net, InitialNode node, int steps, const MarketParams& p,
                    const CounterRng& rng, std::uint32_t iteration, std::uint32_t path, ad::Tape& tape) {
    if (steps < 1) throw UsageError("rollout: need N >= 1");
    const double sd = std::sqrt(step_size(p, node.t0, steps));
    std::vector<double> dW(steps);
    for (int k = 0; k < steps; ++k) {
        dW[k] = sd * rng.normal(iteration, path, static_cast<std::uint32_t>(k + 1), Stream::Brownian);
    }
    return rollout(pi_net, c_net, node, dW, p, tape);
}

/// Tape-recorded batch objective J_hat = (1/M) sum_i J^(i). Small instances only.
struct TapeBatch {
    ad::Var objective;
    std::vector<TapeRollout> paths;
    std::vector<ad::Var> pi_params;
    std::vector<ad::Var> c_params;
};

template <Policy PiP, Policy CP>
TapeBatch batch_objective(const PiP& pi_net, const CP& c_net, const PathBatch& batch, const MarketParams& p,
                          ad::Tape& tape, const SimOptions& o = {}) {
    TapeBatch out;
    out.pi_params = pi_net.register_params(tape);
    out.c_params = c_net.register_params(tape);
    ad::Var sum = tape.constant(0.0);
    for (int i = 0; i < batch.size(); ++i) {
        std::vector<double> dW(batch.dW.col(i).data(), batch.dW.col(i).data() + batch.steps());
        out.paths.push_back(rollout(pi_net, c_net, batch.nodes[i], dW, p, tape, out.pi_params, out.c_params, o));
        sum = sum + out.paths.back().cost;
    }
    out.objective = sum / static_cast<double>(batch.size());
    return out;
}

}  // namespace pgdpo

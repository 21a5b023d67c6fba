// SPDX-License-Identifier: Apache-2.0
#pragma once

// Benchmarks against the closed-form solution: relative MSE of the learned
// controls on a grid, Monte Carlo utility, finite-difference gradient checks
// and a repeated-batch gradient variance probe.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include "pgdpo/engine.hpp"
#include "pgdpo/errors.hpp"
#include "pgdpo/model.hpp"
#include "pgdpo/nn.hpp"
#include "pgdpo/rng.hpp"
#include "pgdpo/sim.hpp"

namespace pgdpo {

struct MetricsReport {
    std::uint64_t iter = 0;
    double relmse_c = 0.0;
    double relmse_pi = 0.0;
    double empirical_utility = 0.0;  // raw mean J (negative for gamma > 1)
    double utility_stderr = 0.0;
    int n_rollouts = 0;
};

struct Grid {
    int n_t = 101;
    int n_x = 101;
};

/// Grid nodes, t-major: point (a, b) has t = t_min + a (t_max - t_min) / (n_t - 1).
inline void grid_points(const Domain& d, Grid g, RowVec& t, RowVec& x) {
    if (g.n_t < 2 || g.n_x < 2) throw UsageError("grid must be at least 2 x 2");
    t.resize(static_cast<Eigen::Index>(g.n_t) * g.n_x);
    x.resize(t.size());
    Eigen::Index q = 0;
    for (int a = 0; a < g.n_t; ++a) {
        for (int b = 0; b < g.n_x; ++b, ++q) {
            t(q) = d.t_min + (d.t_max - d.t_min) * a / (g.n_t - 1);
            x(q) = d.x_min + (d.x_max - d.x_min) * b / (g.n_x - 1);
        }
    }
}

/// Controls of a policy at many points in one batched pass.
template <Policy P>
RowVec policy_controls(const P& net, const RowVec& t, const RowVec& x) {
    MlpCache cache;
    RowVec z;
    net.forward(t, x, cache, z);
    RowVec u(t.size());
    for (Eigen::Index j = 0; j < t.size(); ++j) u(j) = apply_head(net.head(), z(j), x(j));
    return u;
}

using ControlField = std::function<double(double t, double x)>;

/// mean (u - u*)^2 / mean (u*)^2 over a uniform grid on the domain.
template <Policy P>
double relative_mse(const P& net, const ControlField& oracle, const Domain& d, Grid g = {}) {
    RowVec t, x;
    grid_points(d, g, t, x);
    const RowVec u = policy_controls(net, t, x);
    double num = 0.0;
    double den = 0.0;
    for (Eigen::Index j = 0; j < t.size(); ++j) {
        const double ref = oracle(t(j), x(j));
        num += (u(j) - ref) * (u(j) - ref);
        den += ref * ref;
    }
    if (!(den > 0.0)) throw DomainError("relative_mse: oracle is identically zero on the grid");
    return num / den;
}

inline ControlField merton_control(Head head, const MarketParams& p) {
    if (head == Head::Investment) return [p](double, double) { return closed_form_pi(p); };
    return [p](double t, double x) { return closed_form_consumption(p, t, x); };
}

struct UtilityEstimate {
    double mean = 0.0;
    double stderr_ = 0.0;
    double abs_mean = 0.0;
    int n = 0;
};

/// Mean path cost over fresh evaluation rollouts. Nodes and noise come from
/// dedicated streams, so policies evaluated with one seed see common random numbers.
template <Policy PiP, Policy CP>
UtilityEstimate empirical_utility(const PiP& pi_net, const CP& c_net, const Domain& d, int n_rollouts, int steps,
                                  const MarketParams& p, std::uint64_t seed, int threads = 0) {
    if (n_rollouts < 1) throw UsageError("empirical_utility: need at least one rollout");
    const auto batch = draw_batch(d, p, n_rollouts, steps, CounterRng(seed), 0, Stream::EvalNode, Stream::EvalBrownian);
    BatchEvalOptions opt;
    opt.need_grad = false;
    opt.threads = threads;
    const auto res = evaluate_batch(pi_net, c_net, batch, p, opt);
    UtilityEstimate u;
    u.n = n_rollouts;
    u.mean = res.objective;
    u.abs_mean = std::abs(u.mean);
    if (n_rollouts > 1) {
        double ss = 0.0;
        for (double v : res.cost) ss += (v - u.mean) * (v - u.mean);
        u.stderr_ = std::sqrt(ss / (n_rollouts - 1) / n_rollouts);
    }
    return u;
}

/// Plain-loop evaluation of the batch objective in arithmetic type Real, for
/// finite-difference checks. Shares no code with the batched engine beyond the
/// parameter layout.
template <class Real>
Real reference_mlp_raw(const Mlp& net, std::span<const double> params, Real t, Real x) {
    const auto& sizes = net.layer_sizes();
    std::vector<Real> a{t / static_cast<Real>(net.time_scale()), x};
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
        const std::size_t in = static_cast<std::size_t>(sizes[l]);
        const std::size_t out = static_cast<std::size_t>(sizes[l + 1]);
        std::vector<Real> next(out);
        for (std::size_t i = 0; i < out; ++i) {
            Real z = params[net.bias_offset(l) + i];
            for (std::size_t j = 0; j < in; ++j) z += static_cast<Real>(params[net.weight_offset(l) + i * in + j]) * a[j];
            next[i] = (l + 2 < sizes.size() && z <= 0) ? static_cast<Real>(net.slope()) * z : z;
        }
        a = std::move(next);
    }
    return a[0];
}

template <class Real>
Real reference_softplus(Real z) {
    using std::exp;
    using std::log1p;
    return z > 30 ? z + log1p(exp(-z)) : log1p(exp(z));
}

template <class Real>
Real reference_objective(const Mlp& pi_net, std::span<const double> pi_params, const Mlp& c_net,
                         std::span<const double> c_params, const PathBatch& batch, const MarketParams& p,
                         const SimOptions& so = {}) {
    using std::exp;
    using std::pow;
    const Real gamma = p.gamma;
    const Real sigma = p.sigma;
    const Real r = p.r;
    const Real excess = static_cast<Real>(p.mu) - r;
    Real total = 0;
    for (int i = 0; i < batch.size(); ++i) {
        const Real t0 = batch.nodes[static_cast<std::size_t>(i)].t0;
        const Real dt = (static_cast<Real>(p.T) - t0) / batch.steps();
        Real x = batch.nodes[static_cast<std::size_t>(i)].x0;
        Real cost = 0;
        for (int k = 0; k < batch.steps(); ++k) {
            const Real t = t0 + k * dt;
            const Real zpi = reference_mlp_raw<Real>(pi_net, pi_params, t, x);
            const Real pi = std::clamp<Real>(zpi, -kPiBound, kPiBound);
            Real c = x * reference_softplus<Real>(reference_mlp_raw<Real>(c_net, c_params, t, x));
            const Real cap = static_cast<Real>(so.consumption_cap) / dt * x;
            if (c > cap) c = cap;
            cost += exp(-static_cast<Real>(p.rho) * t) * dt * pow(c, 1 - gamma) / (1 - gamma);
            const Real dW = batch.dW(k, i);
            const Real y = x + dt * (r * x + excess * pi * x - c) + sigma * dW * pi * x;
            const Real f = so.wealth_floor;
            const Real s = so.floor_sharpness;
            x = f + s * reference_softplus<Real>((y - f) / s);
        }
        cost += static_cast<Real>(p.kappa) * exp(-static_cast<Real>(p.rho) * static_cast<Real>(p.T)) *
                pow(x, 1 - gamma) / (1 - gamma);
        total += cost;
    }
    return total / batch.size();
}

struct GradcheckOptions {
    double h = 1e-6;
    int max_coords = 50;
    std::uint64_t seed = 0;
};

struct GradcheckResult {
    double max_rel_err = 0.0;
    std::size_t worst_coord = 0;
    double worst_autodiff = 0.0;
    double worst_fd = 0.0;
    int coords_checked = 0;
};

/// Central differences against an analytic gradient on up to max_coords
/// coordinates drawn without replacement. Relative error is
/// |g - fd| / max(|g|, |fd|, 1e-12). `f` may evaluate in extended precision;
/// the difference quotient is formed in long double over the step actually taken.
inline GradcheckResult finite_diff_gradcheck(const std::function<long double(std::span<const double>)>& f,
                                             std::span<const double> grad, std::span<const double> point,
                                             const GradcheckOptions& opt = {}) {
    if (!(opt.h > 0.0)) throw UsageError("finite_diff_gradcheck: h must be > 0");
    if (grad.size() != point.size()) throw UsageError("finite_diff_gradcheck: gradient size mismatch");
    std::vector<std::size_t> idx(point.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > static_cast<std::size_t>(opt.max_coords)) {
        const CounterRng rng(opt.seed);
        for (std::size_t i = 0; i < idx.size(); ++i) {  // Fisher-Yates
            const auto j = i + static_cast<std::size_t>(rng.uniform(0, static_cast<std::uint32_t>(i), 0, Stream::Probe) *
                                                        static_cast<double>(idx.size() - i));
            std::swap(idx[i], idx[std::min(j, idx.size() - 1)]);
        }
        idx.resize(static_cast<std::size_t>(opt.max_coords));
    }
    GradcheckResult r;
    std::vector<double> x(point.begin(), point.end());
    for (std::size_t i : idx) {
        const double saved = x[i];
        const double up = saved + opt.h;
        const double down = saved - opt.h;
        x[i] = up;
        const long double fp = f(x);
        x[i] = down;
        const long double fm = f(x);
        x[i] = saved;
        const auto fd = static_cast<double>((fp - fm) / (static_cast<long double>(up) - down));
        const double err = std::abs(grad[i] - fd) / std::max({std::abs(grad[i]), std::abs(fd), 1e-12});
        ++r.coords_checked;
        if (err >= r.max_rel_err) {
            r.max_rel_err = err;
            r.worst_coord = i;
            r.worst_autodiff = grad[i];
            r.worst_fd = fd;
        }
    }
    return r;
}

struct VarianceProbeOptions {
    int batch = 1000;
    int steps = 100;
    int repeats = 30;
    int reference_batch = 100000;
    int coords = 50;
    std::uint64_t seed = 0;
    int threads = 0;
};

struct VarianceProbe {
    std::vector<std::size_t> coords;  // indices into [grad_pi, grad_c]
    std::vector<double> mean;
    std::vector<double> variance;
    std::vector<double> reference;
    std::vector<double> z;  // (mean - reference) / combined standard error
    double frac_within_3 = 0.0;
};

/// Repeats the batch gradient over independent batches and compares the mean
/// with a large-batch reference gradient.
template <Policy PiP, Policy CP>
VarianceProbe gradient_variance_probe(const PiP& pi_net, const CP& c_net, const MarketParams& p, const Domain& d,
                                      const VarianceProbeOptions& opt) {
    if (opt.repeats < 2) throw UsageError("gradient_variance_probe: need at least two repeats");
    const std::size_t n_pi = pi_net.num_params();
    const std::size_t n_total = n_pi + c_net.num_params();
    const CounterRng rng(opt.seed);

    VarianceProbe out;
    const std::size_t n_coords = std::min<std::size_t>(static_cast<std::size_t>(opt.coords), n_total);
    for (std::size_t i = 0; i < n_coords; ++i) out.coords.push_back(i * n_total / n_coords);

    BatchEvalOptions bo;
    bo.threads = opt.threads;
    auto flat = [&](const BatchResult& r, std::size_t i) { return i < n_pi ? r.grad_pi[i] : r.grad_c[i - n_pi]; };

    std::vector<std::vector<double>> samples(n_coords);
    for (int rep = 0; rep < opt.repeats; ++rep) {
        const auto b = draw_batch(d, p, opt.batch, opt.steps, rng, static_cast<std::uint32_t>(rep + 1), Stream::Probe,
                                  Stream::ProbeBrownian);
        const auto r = evaluate_batch(pi_net, c_net, b, p, bo);
        for (std::size_t c = 0; c < n_coords; ++c) samples[c].push_back(flat(r, out.coords[c]));
    }
    if (opt.reference_batch > 0) {
        const auto b = draw_batch(d, p, opt.reference_batch, opt.steps, rng, 0, Stream::Probe, Stream::ProbeBrownian);
        const auto r = evaluate_batch(pi_net, c_net, b, p, bo);
        for (std::size_t c = 0; c < n_coords; ++c) out.reference.push_back(flat(r, out.coords[c]));
    }
    int within = 0;
    for (std::size_t c = 0; c < n_coords; ++c) {
        const auto& s = samples[c];
        const double mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
        double ss = 0.0;
        for (double v : s) ss += (v - mean) * (v - mean);
        const double var = ss / static_cast<double>(s.size() - 1);
        out.mean.push_back(mean);
        out.variance.push_back(var);
        if (!out.reference.empty()) {
            // Both sides are Monte Carlo estimates; the reference variance is
            // scaled from the per-batch variance by the batch size ratio.
            const double ref_var = var * opt.batch / static_cast<double>(opt.reference_batch);
            const double se = std::sqrt(var / static_cast<double>(s.size()) + ref_var);
            const double z = se > 0.0 ? (mean - out.reference[c]) / se : 0.0;
            out.z.push_back(z);
            if (std::abs(z) <= 3.0) ++within;
        }
    }
    if (!out.z.empty()) out.frac_within_3 = static_cast<double>(within) / static_cast<double>(out.z.size());
    return out;
}

}  // namespace pgdpo

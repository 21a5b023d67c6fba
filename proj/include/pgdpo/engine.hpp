// SPDX-License-Identifier: Apache-2.0
#pragma once

// Batched rollout and backpropagation-through-time. Paths are the columns of
// dense matrices so each network layer becomes one matrix product per step.
//
// The forward pass also carries first and second derivatives of every state in
// the direction of the path's own x0, which yields lambda0 = dJ/dx0 and
// dlambda0/dx0 = d^2J/dx0^2 without a second reverse sweep. The reverse pass is
// the adjoint recursion of the discretized dynamics written out by hand; the
// scalar tape in autodiff.hpp reproduces it node by node in the tests.
//
// Work is split into fixed-size column chunks. Each chunk owns its gradient
// buffer and the buffers are summed in chunk order, so results do not depend
// on the number of worker threads.

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pgdpo/errors.hpp"
#include "pgdpo/jet.hpp"
#include "pgdpo/model.hpp"
#include "pgdpo/nn.hpp"
#include "pgdpo/parallel.hpp"
#include "pgdpo/pmp.hpp"
#include "pgdpo/sim.hpp"

namespace pgdpo {

struct BatchEvalOptions {
    bool need_grad = true;
    bool need_adjoint = false;  // lambda0, dlambda0 and PMP targets per path
    double alpha_c = 0.0;       // penalty weights; used only with need_adjoint
    double alpha_pi = 0.0;
    int chunk = 256;
    int threads = 0;  // 0: PGDPO_THREADS or 1
    bool record_paths = false;
    SimOptions sim;
};

struct PathRecord {
    std::vector<double> t;   // t_0 .. t_N
    std::vector<double> x;   // X_0 .. X_N
    std::vector<double> pi;  // pi_0 .. pi_{N-1}
    std::vector<double> c;   // consumption used, c_0 .. c_{N-1}
};

struct BatchResult {
    double objective = 0.0;  // (1/M) sum_i J_i
    double augmented = 0.0;  // objective minus (1/M) sum over valid paths of the penalty
    double penalty_mean = 0.0;
    double excluded_frac = 0.0;
    std::vector<double> cost;
    std::vector<double> c0;   // consumption policy output at the initial node
    std::vector<double> pi0;  // investment policy output at the initial node
    std::vector<double> lambda0;
    std::vector<double> dlambda0;
    std::vector<std::optional<PmpControls>> targets;
    std::vector<double> grad_pi;     // d augmented / d theta
    std::vector<double> grad_c;      // d augmented / d phi
    std::vector<double> x0_adjoint;  // d augmented / d x0_i
    std::vector<PathRecord> paths;
};

namespace detail {

struct ChunkOut {
    std::vector<double> grad_pi;
    std::vector<double> grad_c;
};

/// sigmoid(x) (1 - sigmoid(x)), the second derivative of softplus.
inline double softplus_curv(double x) {
    const double s = ad::sigmoid(x);
    return s * (1.0 - s);
}

template <Policy PiP, Policy CP>
ChunkOut run_chunk(const PiP& pi_net, const CP& c_net, const PathBatch& batch, const MarketParams& p,
                   const BatchEvalOptions& opt, int begin, int end, BatchResult& res) {
    const int m = end - begin;
    const int steps = batch.steps();
    const double w = 1.0 / static_cast<double>(batch.size());
    const double excess = p.mu - p.r;
    const SimOptions& so = opt.sim;
    const double term_weight = p.kappa * std::exp(-p.rho * p.T);

    RowVec t0(m), dt(m), x(m);
    for (int j = 0; j < m; ++j) {
        const auto& node = batch.nodes[static_cast<std::size_t>(begin + j)];
        t0(j) = node.t0;
        dt(j) = step_size(p, node.t0, steps);
        x(j) = node.x0;
    }

    // Per-step records for the reverse pass.
    const std::size_t keep = opt.need_grad ? static_cast<std::size_t>(steps) : 1;
    std::vector<MlpCache> pi_cache(keep), c_cache(keep);
    std::vector<RowVec> xs, pis, zpis, zcs, cs, ys;
    std::vector<std::vector<char>> capped;
    if (opt.need_grad) {
        xs.reserve(steps);
        pis.reserve(steps);
        zpis.reserve(steps);
        zcs.reserve(steps);
        cs.reserve(steps);
        ys.reserve(steps);
        capped.reserve(steps);
    }

    std::vector<Jet2> xj(static_cast<std::size_t>(m)), cost(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j) {
        xj[j] = opt.need_adjoint ? Jet2::variable(x(j)) : Jet2::constant(x(j));
        cost[j] = Jet2::constant(0.0);
    }
    RowVec dx(m), ddx(m), dzpi, ddzpi, dzc, ddzc;
    RowVec t(m), zpi, zc, pi(m), c(m), y(m);
    std::vector<char> cap_mask(static_cast<std::size_t>(m));

    for (int k = 0; k < steps; ++k) {
        for (int j = 0; j < m; ++j) t(j) = t0(j) + k * dt(j);
        const std::size_t slot = opt.need_grad ? static_cast<std::size_t>(k) : 0;
        pi_net.forward(t, x, pi_cache[slot], zpi);
        c_net.forward(t, x, c_cache[slot], zc);
        if (opt.need_adjoint) {
            for (int j = 0; j < m; ++j) {
                dx(j) = xj[j].d;
                ddx(j) = xj[j].dd;
            }
            pi_net.tangent(pi_cache[slot], dx, ddx, dzpi, ddzpi);
            c_net.tangent(c_cache[slot], dx, ddx, dzc, ddzc);
        }

        for (int j = 0; j < m; ++j) {
            const std::size_t path = static_cast<std::size_t>(begin + j);
            const double xv = x(j);
            const double h = dt(j);
            const bool pi_inside = zpi(j) > -kPiBound && zpi(j) < kPiBound;
            pi(j) = std::clamp(zpi(j), -kPiBound, kPiBound);
            const double sp = ad::softplus(zc(j));
            const double c_policy = std::max(xv * sp, kMinConsumption);
            const double cap = so.consumption_cap / h * xv;
            cap_mask[j] = c_policy > cap;
            c(j) = cap_mask[j] ? cap : c_policy;
            if (k == 0) {
                res.c0[path] = c_policy;
                res.pi0[path] = pi(j);
            }
            if (!(c(j) > 0.0) || !std::isfinite(c(j))) {
                throw NumericError("rollout: consumption left (0, inf) on path " + std::to_string(path) + " step " +
                                       std::to_string(k),
                                   path);
            }
            const double disc = std::exp(-p.rho * t(j)) * h;
            const double u0 = std::pow(c(j), 1.0 - p.gamma) / (1.0 - p.gamma);
            const double u1 = std::pow(c(j), -p.gamma);
            const double dW = batch.dW(k, static_cast<Eigen::Index>(path));
            y(j) = xv + h * (p.r * xv + excess * pi(j) * xv - c(j)) + p.sigma * dW * pi(j) * xv;
            if (!std::isfinite(y(j))) {
                throw NumericError("rollout: non-finite wealth on path " + std::to_string(path) + " step " +
                                       std::to_string(k),
                                   path);
            }
            const double zf = (y(j) - so.wealth_floor) / so.floor_sharpness;
            const double xnext = so.wealth_floor + so.floor_sharpness * ad::softplus(zf);

            if (opt.need_adjoint) {
                const Jet2 X = xj[j];
                const Jet2 PI = pi_inside ? Jet2{pi(j), dzpi(j), ddzpi(j)} : Jet2::constant(pi(j));
                Jet2 C;
                if (cap_mask[j]) {
                    C = (so.consumption_cap / h) * X;
                } else {
                    const Jet2 Z{zc(j), dzc(j), ddzc(j)};
                    C = X * chain(Z, sp, ad::sigmoid(zc(j)), softplus_curv(zc(j)));
                }
                const double u2 = -p.gamma * u1 / c(j);
                cost[j] = cost[j] + disc * chain(C, u0, u1, u2);
                const Jet2 PX = PI * X;
                const Jet2 Y = X + h * (p.r * X + excess * PX - C) + (p.sigma * dW) * PX;
                xj[j] = chain(Y, xnext, ad::sigmoid(zf), softplus_curv(zf) / so.floor_sharpness);
            } else {
                cost[j].v += disc * u0;
                xj[j].v = xnext;
            }
            if (opt.record_paths) {
                auto& rec = res.paths[path];
                rec.t.push_back(t(j));
                rec.x.push_back(xv);
                rec.pi.push_back(pi(j));
                rec.c.push_back(c(j));
            }
        }

        if (opt.need_grad) {
            xs.push_back(x);
            pis.push_back(pi);
            zpis.push_back(zpi);
            zcs.push_back(zc);
            cs.push_back(c);
            ys.push_back(y);
            capped.push_back(cap_mask);
        }
        for (int j = 0; j < m; ++j) x(j) = xj[j].v;
    }

    // Terminal bequest and per-path outputs.
    for (int j = 0; j < m; ++j) {
        const std::size_t path = static_cast<std::size_t>(begin + j);
        const double xv = x(j);
        const double u0 = std::pow(xv, 1.0 - p.gamma) / (1.0 - p.gamma);
        const double u1 = std::pow(xv, -p.gamma);
        if (opt.need_adjoint) {
            cost[j] = cost[j] + term_weight * chain(xj[j], u0, u1, -p.gamma * u1 / xv);
        } else {
            cost[j].v += term_weight * u0;
        }
        if (!std::isfinite(cost[j].v)) {
            throw NumericError("rollout: non-finite path cost on path " + std::to_string(path), path);
        }
        res.cost[path] = cost[j].v;
        if (opt.record_paths) {
            res.paths[path].t.push_back(p.T);
            res.paths[path].x.push_back(xv);
        }
        if (opt.need_adjoint) {
            res.lambda0[path] = cost[j].d;
            res.dlambda0[path] = cost[j].dd;
            const auto& node = batch.nodes[path];
            res.targets[path] = pmp_controls(node.t0, node.x0, cost[j].d, cost[j].dd, p);
        }
    }

    ChunkOut out;
    if (!opt.need_grad) return out;
    out.grad_pi.assign(pi_net.num_params(), 0.0);
    out.grad_c.assign(c_net.num_params(), 0.0);

    const bool penalize = opt.need_adjoint && (opt.alpha_c > 0.0 || opt.alpha_pi > 0.0);
    RowVec xbar(m), zpibar(m), zcbar(m), xbar_pi, xbar_c;
    for (int j = 0; j < m; ++j) xbar(j) = w * term_weight * std::pow(x(j), -p.gamma);

    for (int k = steps - 1; k >= 0; --k) {
        const RowVec& X = xs[k];
        for (int j = 0; j < m; ++j) {
            const std::size_t path = static_cast<std::size_t>(begin + j);
            const double h = dt(j);
            const double tk = t0(j) + k * h;
            const double dW = batch.dW(k, static_cast<Eigen::Index>(path));
            const double zf = (ys[k](j) - so.wealth_floor) / so.floor_sharpness;
            const double ybar = xbar(j) * ad::sigmoid(zf);
            const double pik = pis[k](j);
            double cbar = w * std::exp(-p.rho * tk) * h * std::pow(cs[k](j), -p.gamma) - ybar * h;
            double pibar = ybar * (excess * X(j) * h + p.sigma * X(j) * dW);
            double xb = ybar * (1.0 + p.r * h + pik * excess * h + p.sigma * pik * dW);

            // The penalty acts on the uncapped policy output at the initial node.
            double cpol_bar = 0.0;
            if (k == 0 && penalize && res.targets[path]) {
                const auto& tgt = *res.targets[path];
                const double dc = res.c0[path] - tgt.c_pmp;
                const double dp = res.pi0[path] - tgt.pi_pmp;
                cpol_bar -= w * opt.alpha_c * (dc > 0.0 ? 1.0 : (dc < 0.0 ? -1.0 : 0.0));
                pibar -= w * opt.alpha_pi * (dp > 0.0 ? 1.0 : (dp < 0.0 ? -1.0 : 0.0));
            }
            if (capped[k][j]) {
                xb += cbar * (so.consumption_cap / h);
            } else {
                cpol_bar += cbar;
            }
            const double zck = zcs[k](j);
            xb += cpol_bar * ad::softplus(zck);
            zcbar(j) = cpol_bar * X(j) * ad::sigmoid(zck);
            const double zp = zpis[k](j);
            zpibar(j) = (zp > -kPiBound && zp < kPiBound) ? pibar : 0.0;
            xbar(j) = xb;
        }
        pi_net.backward(pi_cache[k], zpibar, out.grad_pi, xbar_pi);
        c_net.backward(c_cache[k], zcbar, out.grad_c, xbar_c);
        xbar += xbar_pi + xbar_c;
    }
    for (int j = 0; j < m; ++j) res.x0_adjoint[static_cast<std::size_t>(begin + j)] = xbar(j);
    return out;
}

}  // namespace detail

/// Simulates every path of `batch` under the given policies and, if asked,
/// returns the BPTT gradient of the (possibly regularized) batch objective.
template <Policy PiP, Policy CP>
BatchResult evaluate_batch(const PiP& pi_net, const CP& c_net, const PathBatch& batch, const MarketParams& p,
                           const BatchEvalOptions& opt = {}) {
    if (pi_net.head() != Head::Investment) throw UsageError("evaluate_batch: first policy must have investment head");
    if (c_net.head() != Head::Consumption) throw UsageError("evaluate_batch: second policy must have consumption head");
    if (batch.size() < 1 || batch.steps() < 1) throw UsageError("evaluate_batch: empty batch");
    if (opt.chunk < 1) throw UsageError("evaluate_batch: chunk must be >= 1");
    if (!(opt.alpha_c >= 0.0 && opt.alpha_pi >= 0.0)) throw UsageError("evaluate_batch: penalty weights must be >= 0");
    const auto n = static_cast<std::size_t>(batch.size());

    BatchResult res;
    res.cost.assign(n, 0.0);
    res.c0.assign(n, 0.0);
    res.pi0.assign(n, 0.0);
    if (opt.need_adjoint) {
        res.lambda0.assign(n, 0.0);
        res.dlambda0.assign(n, 0.0);
        res.targets.assign(n, std::nullopt);
    }
    if (opt.need_grad) res.x0_adjoint.assign(n, 0.0);
    if (opt.record_paths) res.paths.assign(n, {});

    const int n_chunks = (batch.size() + opt.chunk - 1) / opt.chunk;
    std::vector<detail::ChunkOut> outs(static_cast<std::size_t>(n_chunks));
    parallel_tasks(n_chunks, resolve_threads(opt.threads), [&](int ci) {
        const int begin = ci * opt.chunk;
        const int end = std::min(batch.size(), begin + opt.chunk);
        outs[static_cast<std::size_t>(ci)] = detail::run_chunk(pi_net, c_net, batch, p, opt, begin, end, res);
    });

    double sum = 0.0;
    for (double v : res.cost) sum += v;
    res.objective = sum / static_cast<double>(n);
    res.augmented = res.objective;
    if (opt.need_adjoint) {
        double pen = 0.0;
        std::size_t valid = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (!res.targets[i]) continue;
            pen += alignment_penalty(res.c0[i], res.pi0[i], *res.targets[i], opt.alpha_c, opt.alpha_pi);
            ++valid;
        }
        res.penalty_mean = valid > 0 ? pen / static_cast<double>(valid) : 0.0;
        res.excluded_frac = 1.0 - static_cast<double>(valid) / static_cast<double>(n);
        res.augmented = res.objective - pen / static_cast<double>(n);
    }
    if (opt.need_grad) {
        res.grad_pi.assign(pi_net.num_params(), 0.0);
        res.grad_c.assign(c_net.num_params(), 0.0);
        for (const auto& o : outs) {
            for (std::size_t i = 0; i < o.grad_pi.size(); ++i) res.grad_pi[i] += o.grad_pi[i];
            for (std::size_t i = 0; i < o.grad_c.size(); ++i) res.grad_c[i] += o.grad_c[i];
        }
    }
    return res;
}

}  // namespace pgdpo

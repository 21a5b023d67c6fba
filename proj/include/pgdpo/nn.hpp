// SPDX-License-Identifier: Apache-2.0
#pragma once

// Feed-forward policy networks pi_theta(t, x) and C_phi(t, x), the closed-form
// policy with the same interface, and the Adam optimizer.
//
// A policy maps (t, x) to a raw scalar z; the head turns z into a control:
//   investment   pi = clamp(z, -10, 10)
//   consumption  c  = x * softplus(z)

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pgdpo/autodiff.hpp"
#include "pgdpo/errors.hpp"
#include "pgdpo/model.hpp"
#include "pgdpo/rng.hpp"

namespace pgdpo {

enum class Head { Investment, Consumption };

inline const char* head_name(Head h) { return h == Head::Investment ? "investment" : "consumption"; }

inline constexpr double kPiBound = 10.0;
inline constexpr double kDefaultSlope = 0.01;

/// Smallest consumption the head returns; x * softplus(z) alone can underflow to 0.
inline constexpr double kMinConsumption = std::numeric_limits<double>::denorm_min();

inline double apply_head(Head head, double z, double x) {
    if (head == Head::Investment) return std::clamp(z, -kPiBound, kPiBound);
    return std::max(x * ad::softplus(z), kMinConsumption);
}

inline ad::Var apply_head(Head head, ad::Var z, ad::Var x) {
    if (head == Head::Investment) return ad::min(ad::max(z, -kPiBound), kPiBound);
    return ad::max(x * ad::softplus(z), kMinConsumption);
}

using RowVec = Eigen::RowVectorXd;
using Mat = Eigen::MatrixXd;
using RowMajorMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstRowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

/// Per-step activations kept for the backward and tangent passes.
/// acts[0] is the 2 x m input, acts[l] the post-activation of hidden layer l.
struct MlpCache {
    std::vector<Mat> acts;
};

class Mlp {
public:
    Mlp() = default;

    Mlp(std::vector<int> layer_sizes, Head head, double slope = kDefaultSlope, double time_scale = 1.0)
        : sizes_(std::move(layer_sizes)), head_(head), slope_(slope), time_scale_(time_scale) {
        if (sizes_.size() < 2) throw UsageError("Mlp: need at least input and output layer");
        if (sizes_.front() != 2) throw UsageError("Mlp: input dimension must be 2 (t, x)");
        if (sizes_.back() != 1) throw UsageError("Mlp: output dimension must be 1");
        for (int s : sizes_) {
            if (s <= 0) throw UsageError("Mlp: layer sizes must be positive");
        }
        if (!(slope_ > 0.0 && slope_ < 1.0)) throw UsageError("Mlp: leaky-ReLU slope must be in (0, 1)");
        if (!(time_scale_ > 0.0)) throw UsageError("Mlp: time scale must be > 0");
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
            w_off_.push_back(n);
            n += static_cast<std::size_t>(sizes_[l]) * sizes_[l + 1];
            b_off_.push_back(n);
            n += static_cast<std::size_t>(sizes_[l + 1]);
        }
        params_.assign(n, 0.0);
    }

    const std::vector<int>& layer_sizes() const { return sizes_; }
    Head head() const { return head_; }
    double slope() const { return slope_; }
    double time_scale() const { return time_scale_; }
    std::size_t num_layers() const { return sizes_.size() - 1; }
    std::size_t num_params() const { return params_.size(); }

    std::span<double> params() { return params_; }
    std::span<const double> params() const { return params_; }

    std::size_t weight_offset(std::size_t l) const { return w_off_[l]; }
    std::size_t bias_offset(std::size_t l) const { return b_off_[l]; }

    ConstRowMajorMap weight(std::size_t l) const {
        return {params_.data() + w_off_[l], sizes_[l + 1], sizes_[l]};
    }
    Eigen::Map<const Eigen::VectorXd> bias(std::size_t l) const {
        return {params_.data() + b_off_[l], sizes_[l + 1]};
    }

    double time_input(double t) const { return t / time_scale_; }

    /// Raw (pre-head) output for one point.
    double raw(double t, double x) const {
        Eigen::VectorXd a(2);
        a << time_input(t), x;
        for (std::size_t l = 0; l < num_layers(); ++l) {
            Eigen::VectorXd z = weight(l) * a + bias(l);
            a = l + 1 < num_layers() ? Eigen::VectorXd(z.cwiseMax(slope_ * z)) : z;
        }
        return a(0);
    }

    double control(double t, double x) const { return apply_head(head_, raw(t, x), x); }

    /// Register every parameter as a leaf on `tape` (layout of params()).
    std::vector<ad::Var> register_params(ad::Tape& tape) const {
        std::vector<ad::Var> vars;
        vars.reserve(params_.size());
        for (double p : params_) vars.push_back(tape.variable(p));
        return vars;
    }

    /// Raw output recorded on the tape using registered parameter leaves.
    ad::Var raw(std::span<const ad::Var> pvars, double t, ad::Var x) const {
        if (pvars.size() != params_.size()) throw UsageError("Mlp::raw: parameter vector size mismatch");
        ad::Tape& tape = *x.tape();
        std::vector<ad::Var> a{tape.constant(time_input(t)), x};
        for (std::size_t l = 0; l < num_layers(); ++l) {
            const int in = sizes_[l];
            const int out = sizes_[l + 1];
            std::vector<ad::Var> next;
            next.reserve(out);
            for (int i = 0; i < out; ++i) {
                ad::Var z = pvars[b_off_[l] + i];
                for (int j = 0; j < in; ++j) z = z + pvars[w_off_[l] + static_cast<std::size_t>(i) * in + j] * a[j];
                next.push_back(l + 1 < num_layers() ? ad::leaky_relu(z, slope_) : z);
            }
            a = std::move(next);
        }
        return a[0];
    }

    // Batched passes over m paths (columns).

    void forward(const RowVec& t, const RowVec& x, MlpCache& cache, RowVec& z) const {
        const auto m = t.size();
        cache.acts.resize(num_layers());
        Mat& in = cache.acts[0];
        in.resize(2, m);
        in.row(0) = t / time_scale_;
        in.row(1) = x;
        for (std::size_t l = 0; l < num_layers(); ++l) {
            Mat pre = weight(l) * cache.acts[l];
            pre.colwise() += bias(l);
            if (l + 1 < num_layers()) {
                cache.acts[l + 1] = pre.cwiseMax(slope_ * pre);
            } else {
                z = pre.row(0);
            }
        }
    }

    /// First and second directional derivatives of z given those of x (t is held fixed).
    /// The network is piecewise linear in x, so both propagate through the same
    /// Jacobian; they are stacked side by side to share one product per layer.
    void tangent(const MlpCache& cache, const RowVec& dx, const RowVec& ddx, RowVec& dz, RowVec& ddz) const {
        const auto m = dx.size();
        const std::size_t last = num_layers() - 1;
        const auto w0x = weight(0).col(1);
        if (last == 0) {
            dz = w0x(0) * dx;
            ddz = w0x(0) * ddx;
            return;
        }
        Mat d(sizes_[1], 2 * m);
        d.leftCols(m).noalias() = w0x * dx;
        d.rightCols(m).noalias() = w0x * ddx;
        for (std::size_t l = 1;; ++l) {
            const auto on = (cache.acts[l].array() > 0.0).replicate(1, 2);
            d = on.select(d.array(), slope_ * d.array()).matrix();
            if (l == last) break;
            d = weight(l) * d;
        }
        const RowVec out = weight(last) * d;
        dz = out.leftCols(m);
        ddz = out.rightCols(m);
    }

    /// Accumulates d/dparams of sum_j zbar_j z_j into `grad` and returns d/dx per path.
    void backward(const MlpCache& cache, const RowVec& zbar, std::span<double> grad, RowVec& xbar) const {
        if (grad.size() != params_.size()) throw UsageError("Mlp::backward: gradient size mismatch");
        Mat g = zbar;
        for (std::size_t l = num_layers(); l-- > 0;) {
            const Mat& below = cache.acts[l];
            // Evaluated into owned storage first: written straight into `grad`, the
            // bias row sums took their reduction order from the buffer's alignment.
            const Mat gw = g * below.transpose();
            const Eigen::VectorXd gb = g.rowwise().sum();
            RowMajorMap(grad.data() + w_off_[l], sizes_[l + 1], sizes_[l]) += gw;
            Eigen::Map<Eigen::VectorXd>(grad.data() + b_off_[l], sizes_[l + 1]) += gb;
            if (l == 0) {
                xbar = weight(0).col(1).transpose() * g;
            } else {
                Mat up = weight(l).transpose() * g;
                g = (below.array() > 0.0).select(up.array(), slope_ * up.array()).matrix();
            }
        }
    }

private:
    std::vector<int> sizes_;
    Head head_ = Head::Investment;
    double slope_ = kDefaultSlope;
    double time_scale_ = 1.0;
    std::vector<std::size_t> w_off_;
    std::vector<std::size_t> b_off_;
    // Aligned so that every copy of a network presents the same layout, and so
    // the same rounding, to the vectorized kernels.
    std::vector<double, Eigen::aligned_allocator<double>> params_;
};

/// Uniform(+-sqrt(6 / fan_in)) weights, zero biases; deterministic in `seed`.
inline Mlp mlp_init(const std::vector<int>& layer_sizes, Head head, std::uint64_t seed,
                    double slope = kDefaultSlope, double time_scale = 1.0) {
    Mlp net(layer_sizes, head, slope, time_scale);
    const CounterRng rng(seed);
    auto p = net.params();
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
        const double bound = std::sqrt(6.0 / layer_sizes[l]);
        const std::size_t n = static_cast<std::size_t>(layer_sizes[l]) * layer_sizes[l + 1];
        for (std::size_t i = 0; i < n; ++i) {
            const double u = rng.uniform(static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(i),
                                         static_cast<std::uint32_t>(i >> 32), Stream::Init);
            p[net.weight_offset(l) + i] = bound * (2.0 * u - 1.0);
        }
    }
    return net;
}

/// Closed-form Merton policy exposed through the network interface. Its raw
/// output depends on t only, so every x-derivative and parameter gradient is zero.
class AnalyticPolicy {
public:
    AnalyticPolicy(Head head, const MarketParams& market) : head_(head), market_(market) {
        if (head_ == Head::Consumption && !(market_.kappa > 0.0)) {
            throw UsageError("AnalyticPolicy: closed-form consumption needs kappa > 0");
        }
    }

    Head head() const { return head_; }
    const MarketParams& market() const { return market_; }
    std::size_t num_params() const { return 0; }

    double raw(double t, double /*x*/) const {
        if (head_ == Head::Investment) return closed_form_pi(market_);
        const double rate = closed_form_consumption_rate(market_, t);
        return std::log(std::expm1(rate));  // softplus^{-1}
    }
    double control(double t, double x) const { return apply_head(head_, raw(t, x), x); }

    std::vector<ad::Var> register_params(ad::Tape&) const { return {}; }
    ad::Var raw(std::span<const ad::Var>, double t, ad::Var x) const { return x.tape()->constant(raw(t, 0.0)); }

    void forward(const RowVec& t, const RowVec& /*x*/, MlpCache&, RowVec& z) const {
        z.resize(t.size());
        for (Eigen::Index j = 0; j < t.size(); ++j) z(j) = raw(t(j), 0.0);
    }
    void tangent(const MlpCache&, const RowVec& dx, const RowVec&, RowVec& dz, RowVec& ddz) const {
        dz = RowVec::Zero(dx.size());
        ddz = RowVec::Zero(dx.size());
    }
    void backward(const MlpCache&, const RowVec& zbar, std::span<double>, RowVec& xbar) const {
        xbar = RowVec::Zero(zbar.size());
    }

private:
    Head head_;
    MarketParams market_;
};

/// What the simulator needs from a policy.
template <class P>
concept Policy = requires(const P& p, double t, ad::Var x, ad::Tape& tape, std::span<const ad::Var> pv,
                          const RowVec& row, MlpCache& cache, RowVec& out, std::span<double> grad) {
    { p.head() } -> std::same_as<Head>;
    { p.num_params() } -> std::convertible_to<std::size_t>;
    { p.raw(t, t) } -> std::convertible_to<double>;
    { p.register_params(tape) } -> std::same_as<std::vector<ad::Var>>;
    { p.raw(pv, t, x) } -> std::same_as<ad::Var>;
    p.forward(row, row, cache, out);
    p.tangent(cache, row, row, out, out);
    p.backward(cache, row, grad, out);
};

/// Evaluate a policy's control on a tape. Parameters become fresh leaves
/// unless `pvars` is supplied.
template <Policy P>
ad::Var policy_eval(const P& net, double t, ad::Var x, ad::Tape& tape, std::span<const ad::Var> pvars = {}) {
    if (!std::isfinite(t) || !std::isfinite(x.value())) throw NumericError("policy_eval: non-finite input");
    std::vector<ad::Var> own;
    if (pvars.empty() && net.num_params() > 0) {
        own = net.register_params(tape);
        pvars = own;
    }
    return apply_head(net.head(), net.raw(pvars, t, x), x);
}

// Adam (gradient ascent).

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

inline AdamState adam_init(std::size_t n) {
    AdamState s;
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
    return s;
}

/// params += lr * mhat / (sqrt(vhat) + eps). Throws NumericError and leaves
/// everything untouched if any gradient is non-finite.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& s, double lr) {
    if (params.size() != grads.size() || s.m.size() != params.size() || s.v.size() != params.size()) {
        throw UsageError("adam_step: shape mismatch");
    }
    if (!(lr > 0.0)) throw UsageError("adam_step: learning rate must be > 0");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!std::isfinite(grads[i])) throw NumericError("adam_step: non-finite gradient", i);
    }
    ++s.step;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * grads[i];
        s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * grads[i] * grads[i];
        params[i] += lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + s.eps);
    }
}

}  // namespace pgdpo

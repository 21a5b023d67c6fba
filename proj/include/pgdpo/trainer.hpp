// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training loops. Each iteration samples a fresh batch of initial nodes and
// Brownian increments keyed by the iteration number, differentiates the batch
// objective through time, and takes one Adam ascent step per network. The
// regularized variant additionally pulls the initial-node controls toward the
// targets implied by each path's own costate.

#include <chrono>
#include <cstdint>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "pgdpo/engine.hpp"
#include "pgdpo/errors.hpp"
#include "pgdpo/eval.hpp"
#include "pgdpo/model.hpp"
#include "pgdpo/nn.hpp"
#include "pgdpo/rng.hpp"
#include "pgdpo/sim.hpp"

namespace pgdpo {

enum class Algo { PgDpo, PgDpoReg };

inline const char* algo_name(Algo a) { return a == Algo::PgDpo ? "pgdpo" : "pgdpo-reg"; }

inline Algo parse_algo(const std::string& s) {
    if (s == "pgdpo") return Algo::PgDpo;
    if (s == "pgdpo-reg") return Algo::PgDpoReg;
    throw ConfigError("run.algo must be 'pgdpo' or 'pgdpo-reg', got '" + s + "'");
}

struct TrainConfig {
    std::uint64_t iters = 100000;
    int batch = 10000;
    int steps = 100;
    double lr_pi = 1e-3;
    double lr_c = 1e-5;
    double alpha_c = 1e-3;
    double alpha_pi = 1e-1;
    std::uint64_t seed = 0;
    std::uint64_t metrics_every = 1000;
    std::uint64_t checkpoint_every = 1000;
    int eval_rollouts = 500;
    int eval_grid = 101;
    std::vector<int> hidden{200, 200};
    int chunk = 256;
    int threads = 0;
    Algo algo = Algo::PgDpo;

    void validate() const {
        if (batch < 1) throw ConfigError("train.batch must be >= 1");
        if (steps < 1) throw ConfigError("train.steps must be >= 1");
        if (!(lr_pi > 0.0)) throw ConfigError("train.lr_pi must be > 0");
        if (!(lr_c > 0.0)) throw ConfigError("train.lr_c must be > 0");
        if (!(alpha_c >= 0.0)) throw ConfigError("train.alpha_c must be >= 0");
        if (!(alpha_pi >= 0.0)) throw ConfigError("train.alpha_pi must be >= 0");
        if (metrics_every < 1) throw ConfigError("train.metrics_every must be >= 1");
        if (checkpoint_every < 1) throw ConfigError("train.checkpoint_every must be >= 1");
        if (eval_rollouts < 1) throw ConfigError("train.eval_rollouts must be >= 1");
        if (eval_grid < 2) throw ConfigError("train.eval_grid must be >= 2");
        if (hidden.empty()) throw ConfigError("train.hidden must list at least one layer width");
        for (int h : hidden) {
            if (h < 1) throw ConfigError("train.hidden widths must be >= 1");
        }
        if (chunk < 1) throw ConfigError("train.chunk must be >= 1");
        if (threads < 0) throw ConfigError("train.threads must be >= 0");
    }

    std::vector<int> layer_sizes() const {
        std::vector<int> s{2};
        s.insert(s.end(), hidden.begin(), hidden.end());
        s.push_back(1);
        return s;
    }
};

/// One row of the metrics CSV.
struct MetricsRow {
    std::uint64_t iter = 0;
    double relmse_c = 0.0;
    double relmse_pi = 0.0;
    double empirical_utility = 0.0;
    double penalty_mean = 0.0;
    double excluded_frac = 0.0;
    double wallclock_s = 0.0;
    double abs_empirical_utility = 0.0;
    double utility_stderr = 0.0;
    double batch_objective = 0.0;
    std::uint64_t skipped = 0;
};

inline const std::vector<std::string>& metrics_header() {
    static const std::vector<std::string> h{"iter",          "relmse_c",       "relmse_pi",
                                            "empirical_utility", "penalty_mean", "excluded_frac",
                                            "wallclock_s",   "abs_empirical_utility", "utility_stderr",
                                            "batch_objective", "skipped_iters"};
    return h;
}

/// Network seeds derived from the run seed so the two networks differ.
inline std::uint64_t derived_seed(std::uint64_t seed, std::uint32_t which) {
    const Philox4x32 philox(seed);
    const auto r = philox({which, 0, 0, static_cast<std::uint32_t>(Stream::Init)});
    return (static_cast<std::uint64_t>(r[0]) << 32) | r[1];
}

struct StepOutcome {
    bool ok = true;
    double objective = 0.0;
    double augmented = 0.0;
    double penalty_mean = 0.0;
    double excluded_frac = 0.0;
    std::string error;
};

inline constexpr int kMaxConsecutiveFailures = 3;

class Trainer {
public:
    using Logger = std::function<void(const std::string&)>;

    Trainer(const MarketParams& market, const Domain& domain, const TrainConfig& cfg)
        : market_(market), domain_(domain), cfg_(cfg) {
        market_.validate();
        domain_.validate(market_.T);
        cfg_.validate();
        pi_net_ = mlp_init(cfg_.layer_sizes(), Head::Investment, derived_seed(cfg_.seed, 1), kDefaultSlope, market_.T);
        c_net_ = mlp_init(cfg_.layer_sizes(), Head::Consumption, derived_seed(cfg_.seed, 2), kDefaultSlope, market_.T);
        adam_pi_ = adam_init(pi_net_.num_params());
        adam_c_ = adam_init(c_net_.num_params());
    }

    const MarketParams& market() const { return market_; }
    const Domain& domain() const { return domain_; }
    const TrainConfig& config() const { return cfg_; }
    TrainConfig& config() { return cfg_; }
    const Mlp& pi_net() const { return pi_net_; }
    const Mlp& c_net() const { return c_net_; }
    Mlp& pi_net() { return pi_net_; }
    Mlp& c_net() { return c_net_; }
    AdamState& adam_pi() { return adam_pi_; }
    AdamState& adam_c() { return adam_c_; }
    const AdamState& adam_pi() const { return adam_pi_; }
    const AdamState& adam_c() const { return adam_c_; }
    std::uint64_t iteration() const { return iteration_; }
    void set_iteration(std::uint64_t i) { iteration_ = i; }
    std::uint64_t skipped() const { return skipped_; }
    void set_skipped(std::uint64_t s) { skipped_ = s; }
    int consecutive_failures() const { return consecutive_failures_; }
    void set_consecutive_failures(int n) { consecutive_failures_ = n; }
    const StepOutcome& last_step() const { return last_; }
    void set_last_step(const StepOutcome& s) { last_ = s; }
    std::vector<MetricsRow>& history() { return history_; }
    const std::vector<MetricsRow>& history() const { return history_; }
    double wallclock_offset() const { return wallclock_offset_; }
    void set_wallclock_offset(double s) { wallclock_offset_ = s; }
    void set_logger(Logger log) { log_ = std::move(log); }
    void set_record_wallclock(bool on) { record_wallclock_ = on; }

    /// One iteration. A numeric failure skips the update; the third
    /// consecutive one throws.
    StepOutcome step() {
        StepOutcome out;
        try {
            const CounterRng rng(cfg_.seed);
            const auto batch = draw_batch(domain_, market_, cfg_.batch, cfg_.steps, rng,
                                          static_cast<std::uint32_t>(iteration_));
            BatchEvalOptions opt;
            opt.need_grad = true;
            opt.need_adjoint = cfg_.algo == Algo::PgDpoReg;
            opt.alpha_c = cfg_.alpha_c;
            opt.alpha_pi = cfg_.alpha_pi;
            opt.chunk = cfg_.chunk;
            opt.threads = cfg_.threads;
            const auto res = evaluate_batch(pi_net_, c_net_, batch, market_, opt);
            check_finite(res.grad_pi, "investment");
            check_finite(res.grad_c, "consumption");
            adam_step(pi_net_.params(), res.grad_pi, adam_pi_, cfg_.lr_pi);
            adam_step(c_net_.params(), res.grad_c, adam_c_, cfg_.lr_c);
            out.objective = res.objective;
            out.augmented = res.augmented;
            out.penalty_mean = res.penalty_mean;
            out.excluded_frac = res.excluded_frac;
            consecutive_failures_ = 0;
        } catch (const NumericError& e) {
            out.ok = false;
            out.error = e.what();
            ++skipped_;
            ++consecutive_failures_;
            log("iteration " + std::to_string(iteration_) + " skipped: " + e.what());
            if (consecutive_failures_ >= kMaxConsecutiveFailures) {
                ++iteration_;
                throw NumericError("training aborted after " + std::to_string(consecutive_failures_) +
                                   " consecutive numeric failures; last: " + e.what());
            }
        }
        ++iteration_;
        last_ = out;
        return out;
    }

    /// Metrics for the current parameters.
    MetricsRow evaluate() const {
        MetricsRow row;
        row.iter = iteration_;
        const Grid grid{cfg_.eval_grid, cfg_.eval_grid};
        row.relmse_c = relative_mse(c_net_, merton_control(Head::Consumption, market_), domain_, grid);
        row.relmse_pi = relative_mse(pi_net_, merton_control(Head::Investment, market_), domain_, grid);
        const auto u = empirical_utility(pi_net_, c_net_, domain_, cfg_.eval_rollouts, cfg_.steps, market_, cfg_.seed,
                                         cfg_.threads);
        row.empirical_utility = u.mean;
        row.abs_empirical_utility = u.abs_mean;
        row.utility_stderr = u.stderr_;
        row.penalty_mean = last_.penalty_mean;
        row.excluded_frac = last_.excluded_frac;
        row.batch_objective = last_.objective;
        row.skipped = skipped_;
        row.wallclock_s = record_wallclock_ ? wallclock() : 0.0;
        return row;
    }

    bool metrics_due() const { return iteration_ % cfg_.metrics_every == 0; }
    bool checkpoint_due() const { return iteration_ % cfg_.checkpoint_every == 0; }

    /// Runs until `cfg.iters` iterations have been taken, recording metrics at
    /// the configured cadence and at the end.
    void run(const std::function<void(const Trainer&)>& on_metrics = {},
             const std::function<void(const Trainer&)>& on_checkpoint = {}) {
        while (iteration_ < cfg_.iters) {
            step();
            const bool last = iteration_ == cfg_.iters;
            if (metrics_due() || last) {
                history_.push_back(evaluate());
                if (on_metrics) on_metrics(*this);
            }
            if (on_checkpoint && (checkpoint_due() || last)) on_checkpoint(*this);
        }
    }

    /// Seconds spent in this process plus any carried over from a resumed run.
    double wallclock() const {
        return wallclock_offset_ + std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    }

private:
    static void check_finite(const std::vector<double>& g, const char* which) {
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!std::isfinite(g[i])) throw NumericError(std::string("non-finite ") + which + " gradient", i);
        }
    }

    void log(const std::string& msg) const {
        if (log_) {
            log_(msg);
        } else {
            std::cerr << "[pgdpo] " << msg << '\n';
        }
    }

    MarketParams market_;
    Domain domain_;
    TrainConfig cfg_;
    Mlp pi_net_;
    Mlp c_net_;
    AdamState adam_pi_;
    AdamState adam_c_;
    std::uint64_t iteration_ = 0;
    std::uint64_t skipped_ = 0;
    int consecutive_failures_ = 0;
    StepOutcome last_;
    std::vector<MetricsRow> history_;
    double wallclock_offset_ = 0.0;
    std::chrono::steady_clock::time_point started_ = std::chrono::steady_clock::now();
    bool record_wallclock_ = true;
    Logger log_;
};

struct TrainResult {
    Mlp pi_net;
    Mlp c_net;
    std::vector<MetricsRow> history;
};

/// Plain BPTT training.
inline TrainResult train_pgdpo(TrainConfig cfg, const MarketParams& p, const Domain& d) {
    cfg.algo = Algo::PgDpo;
    Trainer t(p, d, cfg);
    t.run();
    return {t.pi_net(), t.c_net(), t.history()};
}

/// Training with the costate alignment penalty.
inline TrainResult train_pgdpo_reg(TrainConfig cfg, const MarketParams& p, const Domain& d) {
    cfg.algo = Algo::PgDpoReg;
    Trainer t(p, d, cfg);
    t.run();
    return {t.pi_net(), t.c_net(), t.history()};
}

}  // namespace pgdpo

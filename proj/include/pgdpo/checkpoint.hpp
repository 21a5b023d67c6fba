// SPDX-License-Identifier: Apache-2.0
#pragma once

// JSON checkpoints. A checkpoint holds everything needed to continue a run
// exactly: both networks, both Adam states, the iteration counter, the failure
// counters and the metrics history. Policies may also be stored as the closed
// form, which gives an oracle checkpoint for evaluation tests.

#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "pgdpo/errors.hpp"
#include "pgdpo/io.hpp"
#include "pgdpo/model.hpp"
#include "pgdpo/nn.hpp"
#include "pgdpo/trainer.hpp"

namespace pgdpo {

inline constexpr int kCheckpointVersion = 1;

using json = nlohmann::json;
using StoredPolicy = std::variant<Mlp, AnalyticPolicy>;

inline json to_json(const MarketParams& p) {
    return {{"r", p.r}, {"mu", p.mu}, {"sigma", p.sigma}, {"rho", p.rho}, {"gamma", p.gamma}, {"kappa", p.kappa},
            {"T", p.T}};
}

inline json to_json(const Domain& d) {
    return {{"t_min", d.t_min}, {"t_max", d.t_max}, {"x_min", d.x_min}, {"x_max", d.x_max}};
}

inline json to_json(const TrainConfig& c) {
    return {{"iters", c.iters},
            {"batch", c.batch},
            {"steps", c.steps},
            {"lr_pi", c.lr_pi},
            {"lr_c", c.lr_c},
            {"alpha_c", c.alpha_c},
            {"alpha_pi", c.alpha_pi},
            {"seed", c.seed},
            {"metrics_every", c.metrics_every},
            {"checkpoint_every", c.checkpoint_every},
            {"eval_rollouts", c.eval_rollouts},
            {"eval_grid", c.eval_grid},
            {"hidden", c.hidden},
            {"chunk", c.chunk},
            {"algo", algo_name(c.algo)}};
}

inline json to_json(const Mlp& net) {
    return {{"kind", "mlp"},
            {"head", head_name(net.head())},
            {"layer_sizes", net.layer_sizes()},
            {"slope", net.slope()},
            {"time_scale", net.time_scale()},
            {"params", std::vector<double>(net.params().begin(), net.params().end())}};
}

inline json to_json(const AnalyticPolicy& pol) {
    return {{"kind", "closed_form"}, {"head", head_name(pol.head())}};
}

inline json to_json(const StoredPolicy& pol) {
    return std::visit([](const auto& p) { return to_json(p); }, pol);
}

inline json to_json(const AdamState& s) {
    return {{"m", s.m}, {"v", s.v}, {"step", s.step}, {"beta1", s.beta1}, {"beta2", s.beta2}, {"eps", s.eps}};
}

inline json to_json(const MetricsRow& r) {
    return {{"iter", r.iter},
            {"relmse_c", r.relmse_c},
            {"relmse_pi", r.relmse_pi},
            {"empirical_utility", r.empirical_utility},
            {"penalty_mean", r.penalty_mean},
            {"excluded_frac", r.excluded_frac},
            {"wallclock_s", r.wallclock_s},
            {"abs_empirical_utility", r.abs_empirical_utility},
            {"utility_stderr", r.utility_stderr},
            {"batch_objective", r.batch_objective},
            {"skipped", r.skipped}};
}

namespace detail {

inline Head parse_head(const std::string& s) {
    if (s == "investment") return Head::Investment;
    if (s == "consumption") return Head::Consumption;
    throw CheckpointError("unknown policy head '" + s + "'");
}

}  // namespace detail

inline MarketParams market_from_json(const json& j) {
    MarketParams p;
    p.r = j.at("r").get<double>();
    p.mu = j.at("mu").get<double>();
    p.sigma = j.at("sigma").get<double>();
    p.rho = j.at("rho").get<double>();
    p.gamma = j.at("gamma").get<double>();
    p.kappa = j.at("kappa").get<double>();
    p.T = j.at("T").get<double>();
    return p;
}

inline Domain domain_from_json(const json& j) {
    return {j.at("t_min").get<double>(), j.at("t_max").get<double>(), j.at("x_min").get<double>(),
            j.at("x_max").get<double>()};
}

inline TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.iters = j.at("iters").get<std::uint64_t>();
    c.batch = j.at("batch").get<int>();
    c.steps = j.at("steps").get<int>();
    c.lr_pi = j.at("lr_pi").get<double>();
    c.lr_c = j.at("lr_c").get<double>();
    c.alpha_c = j.at("alpha_c").get<double>();
    c.alpha_pi = j.at("alpha_pi").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.metrics_every = j.at("metrics_every").get<std::uint64_t>();
    c.checkpoint_every = j.at("checkpoint_every").get<std::uint64_t>();
    c.eval_rollouts = j.at("eval_rollouts").get<int>();
    c.eval_grid = j.at("eval_grid").get<int>();
    c.hidden = j.at("hidden").get<std::vector<int>>();
    c.chunk = j.at("chunk").get<int>();
    c.algo = parse_algo(j.at("algo").get<std::string>());
    return c;
}

inline StoredPolicy policy_from_json(const json& j, const MarketParams& market) {
    const std::string kind = j.at("kind").get<std::string>();
    const Head head = detail::parse_head(j.at("head").get<std::string>());
    if (kind == "closed_form") return AnalyticPolicy(head, market);
    if (kind != "mlp") throw CheckpointError("unknown policy kind '" + kind + "'");
    Mlp net(j.at("layer_sizes").get<std::vector<int>>(), head, j.at("slope").get<double>(),
            j.at("time_scale").get<double>());
    const auto params = j.at("params").get<std::vector<double>>();
    if (params.size() != net.num_params()) throw CheckpointError("parameter count does not match layer sizes");
    for (double v : params) {
        if (!std::isfinite(v)) throw CheckpointError("non-finite parameter");
    }
    std::copy(params.begin(), params.end(), net.params().begin());
    return net;
}

inline AdamState adam_from_json(const json& j, std::size_t n) {
    AdamState s;
    s.m = j.at("m").get<std::vector<double>>();
    s.v = j.at("v").get<std::vector<double>>();
    s.step = j.at("step").get<std::uint64_t>();
    s.beta1 = j.at("beta1").get<double>();
    s.beta2 = j.at("beta2").get<double>();
    s.eps = j.at("eps").get<double>();
    if (s.m.size() != n || s.v.size() != n) throw CheckpointError("Adam state size does not match the network");
    return s;
}

inline MetricsRow metrics_from_json(const json& j) {
    MetricsRow r;
    r.iter = j.at("iter").get<std::uint64_t>();
    r.relmse_c = j.at("relmse_c").get<double>();
    r.relmse_pi = j.at("relmse_pi").get<double>();
    r.empirical_utility = j.at("empirical_utility").get<double>();
    r.penalty_mean = j.at("penalty_mean").get<double>();
    r.excluded_frac = j.at("excluded_frac").get<double>();
    r.wallclock_s = j.at("wallclock_s").get<double>();
    r.abs_empirical_utility = j.at("abs_empirical_utility").get<double>();
    r.utility_stderr = j.at("utility_stderr").get<double>();
    r.batch_objective = j.at("batch_objective").get<double>();
    r.skipped = j.at("skipped").get<std::uint64_t>();
    return r;
}

/// Full trainer state.
inline json checkpoint_json(const Trainer& t) {
    json hist = json::array();
    for (const auto& r : t.history()) hist.push_back(to_json(r));
    const auto& last = t.last_step();
    return {{"version", kCheckpointVersion},
            {"market", to_json(t.market())},
            {"domain", to_json(t.domain())},
            {"train", to_json(t.config())},
            {"iteration", t.iteration()},
            {"skipped", t.skipped()},
            {"consecutive_failures", t.consecutive_failures()},
            {"wallclock_s", t.wallclock()},
            {"last_step",
             {{"ok", last.ok},
              {"objective", last.objective},
              {"augmented", last.augmented},
              {"penalty_mean", last.penalty_mean},
              {"excluded_frac", last.excluded_frac}}},
            {"pi_policy", to_json(t.pi_net())},
            {"c_policy", to_json(t.c_net())},
            {"adam_pi", to_json(t.adam_pi())},
            {"adam_c", to_json(t.adam_c())},
            {"history", hist}};
}

/// Evaluation-only checkpoint holding two arbitrary policies.
inline json policy_checkpoint_json(const MarketParams& market, const Domain& domain, const StoredPolicy& pi,
                                   const StoredPolicy& c) {
    return {{"version", kCheckpointVersion},
            {"market", to_json(market)},
            {"domain", to_json(domain)},
            {"pi_policy", to_json(pi)},
            {"c_policy", to_json(c)}};
}

inline void save_json(const std::filesystem::path& path, const json& j) { io::write_atomic(path, j.dump()); }

inline json load_checkpoint_json(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
    json j;
    try {
        j = json::parse(io::read_file(path));
    } catch (const json::exception& e) {
        throw CheckpointError("corrupted checkpoint " + path.string() + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("version")) throw CheckpointError("checkpoint has no version field");
    if (!j.at("version").is_number_integer() || j.at("version").get<int>() != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + j.at("version").dump() + " (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    }
    return j;
}

struct LoadedPolicies {
    MarketParams market;
    Domain domain;
    StoredPolicy pi;
    StoredPolicy c;
};

inline LoadedPolicies load_policies(const std::filesystem::path& path) {
    const json j = load_checkpoint_json(path);
    try {
        const auto market = market_from_json(j.at("market"));
        market.validate();
        LoadedPolicies out{market, domain_from_json(j.at("domain")), policy_from_json(j.at("pi_policy"), market),
                           policy_from_json(j.at("c_policy"), market)};
        auto head_of = [](const StoredPolicy& p) { return std::visit([](const auto& q) { return q.head(); }, p); };
        if (head_of(out.pi) != Head::Investment || head_of(out.c) != Head::Consumption) {
            throw CheckpointError("policy heads are swapped or missing");
        }
        return out;
    } catch (const json::exception& e) {
        throw CheckpointError("corrupted checkpoint " + path.string() + ": " + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError("checkpoint market invalid: " + std::string(e.what()));
    }
}

/// Rebuilds a trainer exactly as it was when the checkpoint was written.
inline Trainer restore_trainer(const std::filesystem::path& path) {
    const json j = load_checkpoint_json(path);
    try {
        if (!j.contains("adam_pi")) throw CheckpointError("checkpoint holds policies only and cannot be resumed");
        const auto market = market_from_json(j.at("market"));
        Trainer t(market, domain_from_json(j.at("domain")), train_config_from_json(j.at("train")));
        auto pi = policy_from_json(j.at("pi_policy"), market);
        auto c = policy_from_json(j.at("c_policy"), market);
        if (!std::holds_alternative<Mlp>(pi) || !std::holds_alternative<Mlp>(c)) {
            throw CheckpointError("only network policies can be resumed");
        }
        t.pi_net() = std::get<Mlp>(std::move(pi));
        t.c_net() = std::get<Mlp>(std::move(c));
        if (t.pi_net().layer_sizes() != t.config().layer_sizes() || t.c_net().layer_sizes() != t.config().layer_sizes()) {
            throw CheckpointError("network shape does not match the stored configuration");
        }
        t.adam_pi() = adam_from_json(j.at("adam_pi"), t.pi_net().num_params());
        t.adam_c() = adam_from_json(j.at("adam_c"), t.c_net().num_params());
        t.set_iteration(j.at("iteration").get<std::uint64_t>());
        t.set_skipped(j.at("skipped").get<std::uint64_t>());
        t.set_consecutive_failures(j.at("consecutive_failures").get<int>());
        t.set_wallclock_offset(j.at("wallclock_s").get<double>());
        const auto& ls = j.at("last_step");
        StepOutcome last;
        last.ok = ls.at("ok").get<bool>();
        last.objective = ls.at("objective").get<double>();
        last.augmented = ls.at("augmented").get<double>();
        last.penalty_mean = ls.at("penalty_mean").get<double>();
        last.excluded_frac = ls.at("excluded_frac").get<double>();
        t.set_last_step(last);
        for (const auto& r : j.at("history")) t.history().push_back(metrics_from_json(r));
        return t;
    } catch (const json::exception& e) {
        throw CheckpointError("corrupted checkpoint " + path.string() + ": " + e.what());
    }
}

}  // namespace pgdpo

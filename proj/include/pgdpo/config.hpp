// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration: a small sectioned key = value format.
//
//   [market]  r mu sigma rho gamma kappa epsilon T
//   [domain]  t_min t_max x_min x_max
//   [train]   iters batch steps lr_pi lr_c alpha_c alpha_pi metrics_every
//             checkpoint_every eval_rollouts eval_grid hidden chunk threads
//   [run]     algo seed out
//
// '#' starts a comment. epsilon, if given, sets kappa = epsilon^gamma.

#include <charconv>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pgdpo/errors.hpp"
#include "pgdpo/io.hpp"
#include "pgdpo/model.hpp"
#include "pgdpo/trainer.hpp"

namespace pgdpo {

struct RunConfig {
    MarketParams market;
    Domain domain;
    TrainConfig train;
    std::string out = "run";

    void validate() const {
        market.validate();
        domain.validate(market.T);
        train.validate();
    }
};

/// Raw "section.key" -> value text, in file order of last assignment.
using ConfigEntries = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline double to_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
}

template <class Int>
Int to_int(const std::string& key, const std::string& v) {
    Int out = 0;
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw ConfigError(key + ": expected an integer, got '" + v + "'");
    return out;
}

inline std::vector<int> to_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::string item;
    std::stringstream ss(v);
    while (std::getline(ss, item, ',')) out.push_back(to_int<int>(key, trim(item)));
    if (out.empty()) throw ConfigError(key + ": expected a comma-separated list of integers");
    return out;
}

}  // namespace detail

inline ConfigEntries parse_config_text(const std::string& text) {
    ConfigEntries entries;
    std::string section;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        entries[section.empty() ? key : section + "." + key] = value;
    }
    return entries;
}

/// Applies entries on top of `cfg`. Unknown keys are errors.
inline void apply_entries(RunConfig& cfg, const ConfigEntries& entries) {
    using detail::to_double;
    using detail::to_int;
    std::optional<double> epsilon;
    for (const auto& [key, v] : entries) {
        if (key == "market.r") cfg.market.r = to_double(key, v);
        else if (key == "market.mu") cfg.market.mu = to_double(key, v);
        else if (key == "market.sigma") cfg.market.sigma = to_double(key, v);
        else if (key == "market.rho") cfg.market.rho = to_double(key, v);
        else if (key == "market.gamma") cfg.market.gamma = to_double(key, v);
        else if (key == "market.kappa") cfg.market.kappa = to_double(key, v);
        else if (key == "market.epsilon") epsilon = to_double(key, v);
        else if (key == "market.T") cfg.market.T = to_double(key, v);
        else if (key == "domain.t_min") cfg.domain.t_min = to_double(key, v);
        else if (key == "domain.t_max") cfg.domain.t_max = to_double(key, v);
        else if (key == "domain.x_min") cfg.domain.x_min = to_double(key, v);
        else if (key == "domain.x_max") cfg.domain.x_max = to_double(key, v);
        else if (key == "train.iters") cfg.train.iters = to_int<std::uint64_t>(key, v);
        else if (key == "train.batch") cfg.train.batch = to_int<int>(key, v);
        else if (key == "train.steps") cfg.train.steps = to_int<int>(key, v);
        else if (key == "train.lr_pi") cfg.train.lr_pi = to_double(key, v);
        else if (key == "train.lr_c") cfg.train.lr_c = to_double(key, v);
        else if (key == "train.alpha_c") cfg.train.alpha_c = to_double(key, v);
        else if (key == "train.alpha_pi") cfg.train.alpha_pi = to_double(key, v);
        else if (key == "train.metrics_every") cfg.train.metrics_every = to_int<std::uint64_t>(key, v);
        else if (key == "train.checkpoint_every") cfg.train.checkpoint_every = to_int<std::uint64_t>(key, v);
        else if (key == "train.eval_rollouts") cfg.train.eval_rollouts = to_int<int>(key, v);
        else if (key == "train.eval_grid") cfg.train.eval_grid = to_int<int>(key, v);
        else if (key == "train.hidden") cfg.train.hidden = detail::to_int_list(key, v);
        else if (key == "train.chunk") cfg.train.chunk = to_int<int>(key, v);
        else if (key == "train.threads") cfg.train.threads = to_int<int>(key, v);
        else if (key == "run.algo") cfg.train.algo = parse_algo(v);
        else if (key == "run.seed") cfg.train.seed = to_int<std::uint64_t>(key, v);
        else if (key == "run.out") cfg.out = v;
        else throw ConfigError("unknown config key '" + key + "'");
    }
    if (epsilon) {
        if (entries.count("market.kappa")) throw ConfigError("market.kappa and market.epsilon are mutually exclusive");
        if (!(*epsilon > 0.0)) throw ConfigError("market.epsilon must be > 0");
        cfg.market.kappa = kappa_from_epsilon(*epsilon, cfg.market.gamma);
    }
}

/// Defaults, then the file (if any), then `overrides`; validated.
inline RunConfig parse_config(const std::optional<std::filesystem::path>& path, const ConfigEntries& overrides = {}) {
    ConfigEntries merged;
    if (path) {
        std::string text;
        try {
            text = io::read_file(*path);
        } catch (const std::exception& e) {
            throw ConfigError(std::string("cannot read config: ") + e.what());
        }
        merged = parse_config_text(text);
    }
    // kappa and epsilon are two spellings of one value; the later source wins.
    if (overrides.count("market.kappa")) merged.erase("market.epsilon");
    if (overrides.count("market.epsilon")) merged.erase("market.kappa");
    for (const auto& [k, v] : overrides) merged[k] = v;
    RunConfig cfg;
    apply_entries(cfg, merged);
    cfg.validate();
    return cfg;
}

}  // namespace pgdpo

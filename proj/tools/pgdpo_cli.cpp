// SPDX-License-Identifier: Apache-2.0
//
// pgdpo_cli: train, evaluate and inspect consumption-investment policies.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pgdpo/checkpoint.hpp"
#include "pgdpo/config.hpp"
#include "pgdpo/engine.hpp"
#include "pgdpo/eval.hpp"
#include "pgdpo/io.hpp"
#include "pgdpo/trainer.hpp"

namespace fs = std::filesystem;
using namespace pgdpo;

namespace {

struct Flags {
    std::optional<std::string> config;
    std::optional<std::string> algo;
    std::optional<std::string> iters;
    std::optional<std::string> batch;
    std::optional<std::string> steps;
    std::optional<std::string> lr_pi;
    std::optional<std::string> lr_c;
    std::optional<std::string> alpha_c;
    std::optional<std::string> alpha_pi;
    std::optional<std::string> seed;
    std::optional<std::string> out;
    std::optional<std::string> metrics_every;
    std::optional<std::string> checkpoint_every;
    std::optional<std::string> hidden;
    std::optional<std::string> threads;
    std::optional<std::string> resume;
    std::optional<std::string> checkpoint;
    int dump_paths = 0;
    bool no_wallclock = false;
};

void add_run_flags(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config, "Config file ([market], [domain], [train], [run] sections)");
    cmd->add_option("--algo", f.algo, "pgdpo or pgdpo-reg");
    cmd->add_option("--iters", f.iters, "Training iterations K");
    cmd->add_option("--batch", f.batch, "Paths per iteration M");
    cmd->add_option("--steps", f.steps, "Euler steps per path N");
    cmd->add_option("--lr-pi", f.lr_pi, "Adam rate for the investment network");
    cmd->add_option("--lr-c", f.lr_c, "Adam rate for the consumption network");
    cmd->add_option("--alpha-c", f.alpha_c, "Consumption alignment weight");
    cmd->add_option("--alpha-pi", f.alpha_pi, "Investment alignment weight");
    cmd->add_option("--seed", f.seed, "Run seed");
    cmd->add_option("--out", f.out, "Output directory");
    cmd->add_option("--metrics-every", f.metrics_every, "Metrics cadence in iterations");
    cmd->add_option("--checkpoint-every", f.checkpoint_every, "Checkpoint cadence in iterations");
    cmd->add_option("--hidden", f.hidden, "Hidden layer widths, comma separated");
    cmd->add_option("--threads", f.threads, "Worker threads (default: PGDPO_THREADS or 1)");
}

ConfigEntries overrides_from(const Flags& f) {
    ConfigEntries o;
    auto put = [&](const char* key, const std::optional<std::string>& v) {
        if (v) o[key] = *v;
    };
    put("run.algo", f.algo);
    put("train.iters", f.iters);
    put("train.batch", f.batch);
    put("train.steps", f.steps);
    put("train.lr_pi", f.lr_pi);
    put("train.lr_c", f.lr_c);
    put("train.alpha_c", f.alpha_c);
    put("train.alpha_pi", f.alpha_pi);
    put("run.seed", f.seed);
    put("run.out", f.out);
    put("train.metrics_every", f.metrics_every);
    put("train.checkpoint_every", f.checkpoint_every);
    put("train.hidden", f.hidden);
    put("train.threads", f.threads);
    return o;
}

std::optional<fs::path> opt_path(const std::optional<std::string>& s) {
    if (!s) return std::nullopt;
    return fs::path(*s);
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
    io::CsvBuilder csv(metrics_header());
    for (const auto& r : rows) {
        csv.row({static_cast<double>(r.iter), r.relmse_c, r.relmse_pi, r.empirical_utility, r.penalty_mean,
                 r.excluded_frac, r.wallclock_s, r.abs_empirical_utility, r.utility_stderr, r.batch_objective,
                 static_cast<double>(r.skipped)});
    }
    return csv.str();
}

template <Policy PiP, Policy CP>
std::string surface_csv(const PiP& pi, const CP& c, const MarketParams& p, const Domain& d, int n) {
    RowVec t, x;
    grid_points(d, {n, n}, t, x);
    const RowVec c_learned = policy_controls(c, t, x);
    const RowVec pi_learned = policy_controls(pi, t, x);
    io::CsvBuilder csv({"t", "x", "c_learned", "c_exact", "pi_learned", "pi_exact"});
    for (Eigen::Index j = 0; j < t.size(); ++j) {
        csv.row({t(j), x(j), c_learned(j), closed_form_consumption(p, t(j), x(j)), pi_learned(j), closed_form_pi(p)});
    }
    return csv.str();
}

std::string paths_csv_header() { return "iter,path,k,t,x,pi,c\n"; }

void append_paths(std::string& text, std::uint64_t iter, const BatchResult& res, int n_paths) {
    for (int i = 0; i < n_paths && i < static_cast<int>(res.paths.size()); ++i) {
        const auto& rec = res.paths[static_cast<std::size_t>(i)];
        for (std::size_t k = 0; k < rec.x.size(); ++k) {
            const bool has_ctrl = k < rec.pi.size();
            text += std::to_string(iter) + ',' + std::to_string(i) + ',' + std::to_string(k) + ',' +
                    io::fmt_double(rec.t[k]) + ',' + io::fmt_double(rec.x[k]) + ',' +
                    (has_ctrl ? io::fmt_double(rec.pi[k]) : std::string()) + ',' +
                    (has_ctrl ? io::fmt_double(rec.c[k]) : std::string()) + '\n';
        }
    }
}

std::string checkpoint_name(std::uint64_t iter) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "ckpt_%09llu.json", static_cast<unsigned long long>(iter));
    return buf;
}

/// Keeps the newest `keep` checkpoints plus the milestone iterations.
void prune_checkpoints(const fs::path& dir, std::size_t keep) {
    static const std::set<std::uint64_t> milestones{1000, 10000, 50000, 100000};
    std::vector<std::pair<std::uint64_t, fs::path>> found;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("ckpt_", 0) != 0 || e.path().extension() != ".json") continue;
        found.emplace_back(std::stoull(name.substr(5, 9)), e.path());
    }
    std::sort(found.begin(), found.end());
    if (found.size() <= keep) return;
    for (std::size_t i = 0; i + keep < found.size(); ++i) {
        if (!milestones.count(found[i].first)) fs::remove(found[i].second);
    }
}

int cmd_train(const Flags& f) {
    std::optional<Trainer> trainer;
    fs::path out;
    if (f.resume) {
        trainer.emplace(restore_trainer(*f.resume));
        if (f.iters) trainer->config().iters = std::stoull(*f.iters);
        if (f.threads) trainer->config().threads = std::stoi(*f.threads);
        const fs::path dir = fs::path(*f.resume).parent_path();
        out = f.out ? fs::path(*f.out) : (dir.filename() == "checkpoints" ? dir.parent_path() : dir);
    } else {
        const RunConfig cfg = parse_config(opt_path(f.config), overrides_from(f));
        for (const auto& w : cfg.market.warnings()) std::cerr << "warning: " << w << '\n';
        trainer.emplace(cfg.market, cfg.domain, cfg.train);
        out = cfg.out;
    }
    Trainer& t = *trainer;
    t.set_record_wallclock(!f.no_wallclock);
    fs::create_directories(out / "checkpoints");

    std::string paths_text = paths_csv_header();
    const auto on_metrics = [&](const Trainer& tr) {
        const auto& r = tr.history().back();
        std::printf("iter %llu  relmse_c %.6g  relmse_pi %.6g  utility %.6g (se %.2g)  penalty %.4g  excluded %.4g\n",
                    static_cast<unsigned long long>(r.iter), r.relmse_c, r.relmse_pi, r.empirical_utility,
                    r.utility_stderr, r.penalty_mean, r.excluded_frac);
        std::fflush(stdout);
        io::write_atomic(out / "metrics.csv", metrics_csv(tr.history()));
        if (f.dump_paths > 0 && tr.iteration() > 0) {
            const auto& cfg = tr.config();
            auto batch = draw_batch(tr.domain(), tr.market(), cfg.batch, cfg.steps, CounterRng(cfg.seed),
                                    static_cast<std::uint32_t>(tr.iteration() - 1));
            const int n = std::min(f.dump_paths, cfg.batch);
            batch.nodes.resize(static_cast<std::size_t>(n));
            batch.dW = Mat(batch.dW.leftCols(n));
            BatchEvalOptions opt;
            opt.need_grad = false;
            opt.record_paths = true;
            append_paths(paths_text, tr.iteration(), evaluate_batch(tr.pi_net(), tr.c_net(), batch, tr.market(), opt),
                         n);
            io::write_atomic(out / "paths.csv", paths_text);
        }
    };
    const auto on_checkpoint = [&](const Trainer& tr) {
        save_json(out / "checkpoints" / checkpoint_name(tr.iteration()), checkpoint_json(tr));
        prune_checkpoints(out / "checkpoints", 3);
    };

    try {
        t.run(on_metrics, on_checkpoint);
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << '\n';
        save_json(out / "checkpoints" / checkpoint_name(t.iteration()), checkpoint_json(t));
        return 3;
    }
    io::write_atomic(out / "metrics.csv", metrics_csv(t.history()));
    save_json(out / "final.json", checkpoint_json(t));
    io::write_atomic(out / "surface.csv",
                     surface_csv(t.pi_net(), t.c_net(), t.market(), t.domain(), t.config().eval_grid));
    return 0;
}

int cmd_eval(const Flags& f, int rollouts, int steps, std::uint64_t seed, int grid) {
    if (!f.checkpoint) throw UsageError("eval needs --checkpoint");
    const auto loaded = load_policies(*f.checkpoint);
    const MarketParams& p = loaded.market;
    const Domain& d = loaded.domain;
    return std::visit(
        [&](const auto& pi, const auto& c) {
            const Grid g{grid, grid};
            const double rc = relative_mse(c, merton_control(Head::Consumption, p), d, g);
            const double rp = relative_mse(pi, merton_control(Head::Investment, p), d, g);
            const auto u = empirical_utility(pi, c, d, rollouts, steps, p, seed);
            const auto ref = empirical_utility(AnalyticPolicy(Head::Investment, p), AnalyticPolicy(Head::Consumption, p),
                                               d, rollouts, steps, p, seed);
            json report{{"relmse_c", rc},
                        {"relmse_pi", rp},
                        {"empirical_utility", u.mean},
                        {"abs_empirical_utility", u.abs_mean},
                        {"utility_stderr", u.stderr_},
                        {"closed_form_utility", ref.mean},
                        {"utility_gap", std::abs(u.mean - ref.mean) / std::abs(ref.mean)},
                        {"n_rollouts", rollouts}};
            std::cout << report.dump(2) << '\n';
            if (f.out) {
                const fs::path out(*f.out);
                io::write_atomic(out / "eval.json", report.dump(2));
                io::write_atomic(out / "surface.csv", surface_csv(pi, c, p, d, grid));
            }
            return 0;
        },
        loaded.pi, loaded.c);
}

int cmd_dump_surface(const Flags& f, int grid) {
    if (!f.checkpoint) throw UsageError("dump-surface needs --checkpoint");
    const auto loaded = load_policies(*f.checkpoint);
    const fs::path out = f.out ? fs::path(*f.out) : fs::path("surface.csv");
    const fs::path file = out.extension() == ".csv" ? out : out / "surface.csv";
    std::visit([&](const auto& pi, const auto& c) {
        io::write_atomic(file, surface_csv(pi, c, loaded.market, loaded.domain, grid));
    }, loaded.pi, loaded.c);
    std::cout << "wrote " << file.string() << '\n';
    return 0;
}

/// End-to-end finite-difference check on a tiny instance.
int cmd_gradcheck(int paths, int steps, int width, double h, std::uint64_t seed) {
    const MarketParams p;
    const Domain d;
    const std::vector<int> sizes{2, width, width, 1};
    Mlp pi = mlp_init(sizes, Head::Investment, derived_seed(seed, 1));
    Mlp c = mlp_init(sizes, Head::Consumption, derived_seed(seed, 2));
    const auto batch = draw_batch(d, p, paths, steps, CounterRng(seed), 0);
    BatchEvalOptions opt;
    const auto res = evaluate_batch(pi, c, batch, p, opt);
    std::vector<double> point(pi.params().begin(), pi.params().end());
    point.insert(point.end(), c.params().begin(), c.params().end());
    std::vector<double> grad = res.grad_pi;
    grad.insert(grad.end(), res.grad_c.begin(), res.grad_c.end());
    const std::size_t n_pi = pi.num_params();
    const auto f = [&](std::span<const double> x) {
        return reference_objective<long double>(pi, x.first(n_pi), c, x.subspan(n_pi), batch, p);
    };
    GradcheckOptions go;
    go.h = h;
    go.seed = seed;
    const auto r = finite_diff_gradcheck(f, grad, point, go);
    std::printf("gradcheck: %d coords, max rel err %.3e (coord %zu: autodiff %.12g, fd %.12g)\n", r.coords_checked,
                r.max_rel_err, r.worst_coord, r.worst_autodiff, r.worst_fd);
    return r.max_rel_err < 1e-5 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Policy training for the Merton consumption-investment problem"};
    app.require_subcommand(1);
    Flags f;

    auto* train = app.add_subcommand("train", "Train both policy networks");
    add_run_flags(train, f);
    train->add_option("--resume", f.resume, "Continue from a checkpoint file");
    train->add_option("--dump-paths", f.dump_paths, "Write the first N paths of each metrics iteration to paths.csv");
    train->add_flag("--no-wallclock", f.no_wallclock, "Write 0 in the wallclock_s column (byte-stable output)");

    int rollouts = 500;
    int steps = 100;
    std::uint64_t eval_seed = 0;
    int grid = 101;
    auto* eval = app.add_subcommand("eval", "Relative MSE and utility of a checkpoint");
    eval->add_option("--checkpoint", f.checkpoint, "Checkpoint file")->required();
    eval->add_option("--out", f.out, "Directory for eval.json and surface.csv");
    eval->add_option("--rollouts", rollouts, "Evaluation rollouts");
    eval->add_option("--steps", steps, "Euler steps per rollout");
    eval->add_option("--seed", eval_seed, "Evaluation seed");
    eval->add_option("--grid", grid, "Grid points per axis");

    auto* dump = app.add_subcommand("dump-surface", "Write learned and exact policy surfaces as CSV");
    dump->add_option("--checkpoint", f.checkpoint, "Checkpoint file")->required();
    dump->add_option("--out", f.out, "Output CSV file or directory");
    dump->add_option("--grid", grid, "Grid points per axis");

    int gc_paths = 4;
    int gc_steps = 10;
    int gc_width = 8;
    double gc_h = 1e-6;
    std::uint64_t gc_seed = 0;
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the BPTT gradient on a tiny instance");
    gc->add_option("--batch", gc_paths, "Paths");
    gc->add_option("--steps", gc_steps, "Euler steps");
    gc->add_option("--width", gc_width, "Hidden width");
    gc->add_option("--step-size", gc_h, "Finite-difference step");
    gc->add_option("--seed", gc_seed, "Seed");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*train) return cmd_train(f);
        if (*eval) return cmd_eval(f, rollouts, steps, eval_seed, grid);
        if (*dump) return cmd_dump_surface(f, grid);
        if (*gc) return cmd_gradcheck(gc_paths, gc_steps, gc_width, gc_h, gc_seed);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

// drml: train, evaluate, sweep, map landscapes and run self-checks.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "drml/config.hpp"
#include "drml/evalreport.hpp"
#include "drml/models.hpp"
#include "drml/selftest.hpp"

namespace fs = std::filesystem;
using namespace drml;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

config::ExperimentConfig config_for_checkpoint(const std::string& config_path, const fs::path& ckpt_path,
                                               const models::Checkpoint& ckpt) {
    if (!config_path.empty()) return config::load_config(config_path);
    const auto meta = models::read_checkpoint_metadata(ckpt_path);
    if (meta == "{}") throw UsageError("checkpoint has no stored config; pass --config");
    auto c = config::parse_config(meta);
    if (!(c.train.model == ckpt.spec)) throw std::runtime_error("stored config does not match the checkpoint model");
    return c;
}

models::Checkpoint load_checkpoint(const fs::path& p) {
    if (!fs::exists(p)) throw UsageError("checkpoint not found: " + p.string());
    return models::read_checkpoint(p);
}

void print_report(const std::string& what, const eval::MetricsReport& r) {
    std::printf("%s alpha_eval %.3g: average %.6g  worst %.6g  cvar %.6g  (%zu tasks)\n", what.c_str(), r.alpha_eval,
                r.average, r.worst, r.cvar, r.n_tasks);
}

int cmd_train(const std::string& config_path, const std::string& out, const std::vector<std::uint64_t>& seeds) {
    auto c = config::load_config(config_path);
    if (!seeds.empty()) c.seeds = seeds;
    const fs::path root = out.empty() ? fs::path(c.output_dir) / c.name : fs::path(out);
    for (auto seed : c.seeds) {
        const auto dir = c.seeds.size() == 1 && !out.empty() ? root : root / ("seed_" + std::to_string(seed));
        std::printf("training %s seed %llu -> %s\n", c.name.c_str(), (unsigned long long)seed, dir.c_str());
        std::fflush(stdout);
        const auto o = config::run_experiment(c, seed, dir);
        for (const auto& r : o.reports) print_report("  test", r);
    }
    return kOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& config_path, const std::vector<double>& alphas,
             const std::optional<std::uint64_t>& seed, const std::string& out) {
    const auto ckpt = load_checkpoint(ckpt_path);
    auto c = config_for_checkpoint(config_path, ckpt_path, ckpt);
    if (seed) c.eval.seed = *seed;
    const auto list = alphas.empty() ? c.eval.alphas : alphas;
    for (double a : list) {
        try {
            risk::check_alpha(a);
        } catch (const std::invalid_argument& e) {
            throw UsageError(std::string("--alphas: ") + e.what());
        }
    }
    const auto reports = config::evaluate_checkpoint(c, ckpt, list);
    const fs::path dir = out.empty() ? fs::path(ckpt_path).parent_path() : fs::path(out);
    fs::create_directories(dir);
    for (std::size_t k = 0; k < reports.size(); ++k) {
        const auto path = dir / ("eval_alpha_" + std::to_string(k) + ".json");
        eval::write_metrics_json(path, reports[k]);
        print_report(path.string(), reports[k]);
    }
    return kOk;
}

int cmd_sweep(const std::string& config_path, const std::string& axis, const std::vector<double>& values,
              const std::vector<std::uint64_t>& seeds, const std::string& out) {
    const auto c = config::load_config(config_path);
    config::SweepAxis ax;
    try {
        ax = config::parse_sweep_axis(axis);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (values.empty()) throw UsageError("--values must list at least one value");
    const fs::path dir = out.empty() ? fs::path(c.output_dir) / (c.name + "_sweep_" + axis) : fs::path(out);
    const auto res = config::run_sweep(c, ax, values, seeds.empty() ? c.seeds : seeds, dir);
    for (const auto& row : res.rows) {
        std::printf("%-20s seed %-4llu average %.6g  worst %.6g  cvar %.6g\n", row.label.c_str(),
                    (unsigned long long)row.seed, row.average, row.worst, row.cvar);
    }
    for (const auto& s : res.status) {
        if (!s.ok) std::fprintf(stderr, "run %s seed %llu failed: %s\n", s.label.c_str(), (unsigned long long)s.seed,
                                s.message.c_str());
    }
    std::printf("comparison written to %s\n", (dir / "comparison.csv").c_str());
    return res.complete() ? kOk : kRuntime;
}

int cmd_landscape(const std::string& ckpt_path, const std::string& config_path, const std::optional<std::uint64_t>& seed,
                  const std::string& out, const std::string& resolution) {
    const auto ckpt = load_checkpoint(ckpt_path);
    auto c = config_for_checkpoint(config_path, ckpt_path, ckpt);
    if (c.family != config::TaskFamily::sinusoid) throw UsageError("landscapes are defined for sinusoid models");
    if (seed) c.eval.seed = *seed;
    int na = c.sinusoid.grid_amplitudes, nb = c.sinusoid.grid_phases;
    if (!resolution.empty()) {
        char x = 0;
        std::istringstream ss(resolution);
        if (!(ss >> na >> x >> nb) || x != 'x' || na < 1 || nb < 1) throw UsageError("--resolution must look like 49x10");
    }
    const auto g = eval::landscape(ckpt.spec, ckpt.params, tasks::grid_amplitudes(na), tasks::grid_phases(nb),
                                   config::eval_settings(c, c.eval.alphas.front()));
    const fs::path path = out.empty() ? fs::path(ckpt_path).parent_path() / "landscape.csv" : fs::path(out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    eval::write_landscape_csv(path, g);
    std::printf("landscape %dx%d written to %s\n", na, nb, path.c_str());
    return kOk;
}

int cmd_selftest(std::uint64_t seed, double kappa_offset) {
    selftest::Options opt;
    opt.seed = seed;
    opt.kappa_offset = kappa_offset;
    bool ok = true;
    for (const auto& s : selftest::run_all(opt)) {
        std::printf("%-22s %s  (%zu checks)\n", s.name.c_str(), s.passed() ? "PASS" : "FAIL", s.checks);
        for (const auto& f : s.failures) std::printf("    %s\n", f.c_str());
        ok = ok && s.passed();
    }
    return ok ? kOk : kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Tail-risk meta-learning on sinusoid and GP regression"};
    app.require_subcommand(1);

    std::string config_path, out, ckpt, axis, resolution;
    std::vector<std::uint64_t> seeds;
    std::vector<double> alphas, values;
    std::uint64_t seed = 0;
    double kappa_offset = 0.0;

    auto* train = app.add_subcommand("train", "Meta-train one run per seed");
    train->add_option("--config", config_path, "Experiment config (JSON)")->required();
    train->add_option("--out", out, "Run directory (default: <output_dir>/<name>)");
    train->add_option("--seeds", seeds, "Override the config's seed list")->delimiter(',');

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the test task set");
    ev->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
    ev->add_option("--config", config_path, "Config (default: the one stored with the checkpoint)");
    ev->add_option("--alphas", alphas, "Evaluation tail levels")->delimiter(',');
    auto* ev_seed = ev->add_option("--seed", seed, "Evaluation data seed");
    ev->add_option("--out", out, "Output directory (default: next to the checkpoint)");

    auto* sweep = app.add_subcommand("sweep", "Train and compare across one config axis");
    sweep->add_option("--config", config_path, "Base config")->required();
    sweep->add_option("--axis", axis, "alpha or batch_size")->required();
    sweep->add_option("--values", values, "Axis values")->delimiter(',')->required();
    sweep->add_option("--seeds", seeds, "Seeds (default: the config's)")->delimiter(',');
    sweep->add_option("--out", out, "Sweep directory");

    auto* land = app.add_subcommand("landscape", "Post-adaptation loss over an amplitude x phase grid");
    land->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
    land->add_option("--config", config_path, "Config (default: the one stored with the checkpoint)");
    auto* land_seed = land->add_option("--seed", seed, "Evaluation data seed");
    land->add_option("--out", out, "CSV path (default: landscape.csv next to the checkpoint)");
    land->add_option("--resolution", resolution, "Grid shape, e.g. 49x10");

    auto* self = app.add_subcommand("selftest", "Run the built-in consistency suites");
    self->add_option("--seed", seed, "Suite seed")->default_val(20240607);
    self->add_option("--kappa-offset", kappa_offset, "Perturb the sandwich constant (mutation check)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*train) return cmd_train(config_path, out, seeds);
        if (*ev) return cmd_eval(ckpt, config_path, alphas, ev_seed->count() ? std::optional(seed) : std::nullopt, out);
        if (*sweep) return cmd_sweep(config_path, axis, values, seeds, out);
        if (*land) {
            return cmd_landscape(ckpt, config_path, land_seed->count() ? std::optional(seed) : std::nullopt, out,
                                 resolution);
        }
        if (*self) return cmd_selftest(seed, kappa_offset);
    } catch (const config::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kUsage;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
    return kUsage;
}

#pragma once

// Declarative experiment configuration (JSON) and the run-directory workflow
// shared by the command-line tool and the tests.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "drml/evalreport.hpp"
#include "drml/tasks.hpp"
#include "drml/train.hpp"

namespace drml::config {

/// Invalid or incomplete configuration; `field` is the dotted key path.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string field, const std::string& message)
        : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

enum class TaskFamily { sinusoid, gp };

std::string to_string(TaskFamily f);

struct EvalConfig {
    std::vector<double> alphas{0.7};  // the first one is used for periodic evaluation
    std::uint64_t seed = 1000;
    std::size_t gp_tasks = 100;  // size of the GP test set
};

struct ExperimentConfig {
    std::string name = "experiment";
    TaskFamily family = TaskFamily::sinusoid;
    tasks::SineDistConfig sinusoid;
    tasks::GPConfig gp;
    train::TrainConfig train;  // seed is set per run from `seeds`
    EvalConfig eval;
    std::vector<std::uint64_t> seeds{0};
    std::string output_dir = "runs";

    /// Cross-field checks; throws ConfigError.
    void validate() const;
};

/// Parses and validates. Required keys: task.family, model.kind,
/// principle.kind, train.iterations, seeds. Unknown keys are rejected.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical form with every field spelled out; parse_config(to_json(c))
/// reproduces c.
std::string to_json(const ExperimentConfig& c);

// ---------------------------------------------------------------------------

std::unique_ptr<train::TaskSource> make_task_source(const ExperimentConfig& c, std::uint64_t seed);

/// Test task set: the 490-task sinusoid grid or eval.gp_tasks GP curves.
std::vector<tasks::TaskData> eval_task_data(const ExperimentConfig& c);

eval::EvalSettings eval_settings(const ExperimentConfig& c, double alpha);

struct RunOutcome {
    std::filesystem::path run_dir;
    train::TrainResult result;
    std::vector<eval::MetricsReport> reports;  // one per eval alpha
};

/// Trains one seed into `run_dir`: config.json (canonical, seeds = [seed]),
/// run_info.json, trace.csv, eval_<iter>.json, checkpoints, and
/// metrics_<k>.json for the k-th eval alpha.
RunOutcome run_experiment(const ExperimentConfig& c, std::uint64_t seed, const std::filesystem::path& run_dir);

/// Evaluates a checkpoint at each alpha on the config's test task set.
std::vector<eval::MetricsReport> evaluate_checkpoint(const ExperimentConfig& c, const models::Checkpoint& ckpt,
                                                     const std::vector<double>& alphas);

enum class SweepAxis { alpha, batch_size };

SweepAxis parse_sweep_axis(const std::string& s);
std::string to_string(SweepAxis a);

struct SweepRunStatus {
    std::string label;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string message;
};

struct SweepResult {
    std::vector<eval::ComparisonRow> rows;
    std::vector<SweepRunStatus> status;
    bool complete() const;
};

/// One run per (value, seed) under out/<axis>=<value>/seed_<seed>. Failed
/// runs are recorded and the sweep continues. Writes comparison.csv,
/// sweep_status.csv and hist_<label>_seed<seed>.csv.
SweepResult run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<double>& values,
                      const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out);

}  // namespace drml::config

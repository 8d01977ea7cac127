#pragma once

// Post-adaptation evaluation on fixed task sets and the files behind tables
// and plots: metrics JSON, histogram CSV, landscape CSV, run comparisons.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "drml/models.hpp"
#include "drml/params.hpp"
#include "drml/tasks.hpp"

namespace drml::eval {

enum class AdaptKind { maml_one_step, cnp_condition };

std::string to_string(AdaptKind k);
AdaptKind parse_adapt_kind(const std::string& s);

struct MetricsReport {
    double average = 0.0;
    double worst = 0.0;
    double cvar = 0.0;
    double alpha_eval = 0.0;
    std::size_t n_tasks = 0;
    std::vector<double> per_task_losses;  // task-index order
};

/// Average, worst and tail mean of an explicit loss list.
MetricsReport metrics_from_losses(std::vector<double> losses, double alpha_eval);

struct EvalSettings {
    int shots = 5;      // K
    int targets = 5;    // M, sinusoid only
    double alpha_eval = 0.7;
    AdaptKind adapt = AdaptKind::maml_one_step;
    double inner_lr = 0.01;  // maml_one_step
    std::uint64_t seed = 0;
    double x_min = -5.0, x_max = 5.0;
};

/// Task i draws its context and targets from stream(seed, {i}).
std::vector<tasks::TaskData> sine_eval_data(const std::vector<tasks::SineTask>& tasks, const EvalSettings& s);

/// n GP test curves; curve i uses stream(seed, {i}).
std::vector<tasks::TaskData> gp_eval_data(const tasks::GPConfig& cfg, std::size_t n, std::uint64_t seed);

/// Target loss of each task after adaptation: one inner step then target MSE,
/// or conditioning on the context then target NLL.
std::vector<double> task_losses(const models::ModelSpec& spec, const ParamVector& params,
                                const std::vector<tasks::TaskData>& data, const EvalSettings& s);

MetricsReport evaluate_metrics(const models::ModelSpec& spec, const ParamVector& params,
                               const std::vector<tasks::TaskData>& data, const EvalSettings& s);

MetricsReport evaluate_metrics(const models::ModelSpec& spec, const ParamVector& params,
                               const std::vector<tasks::SineTask>& tasks, const EvalSettings& s);

std::string to_json(const MetricsReport& r);
MetricsReport metrics_from_json(const std::string& text);
void write_metrics_json(const std::filesystem::path& path, const MetricsReport& r);
MetricsReport read_metrics_json(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct Histogram {
    std::vector<double> edges;  // n_bins + 1, strictly increasing
    std::vector<std::size_t> counts;
    std::size_t total = 0;
};

/// Uniform bins over [lo, hi]; values outside are clamped into the end bins.
Histogram histogram(std::span<const double> losses, std::size_t n_bins, double lo, double hi);

/// Default display range: [min(0, smallest loss), 99th percentile]. When the
/// range collapses it is widened by one unit.
std::pair<double, double> default_range(std::span<const double> losses);

/// 30 bins over default_range.
Histogram histogram(std::span<const double> losses);

/// Fraction of losses strictly above `threshold`.
double mass_above(std::span<const double> losses, double threshold);

void write_histogram_csv(const std::filesystem::path& path, const Histogram& h);
Histogram read_histogram_csv(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct LandscapeGrid {
    Eigen::VectorXd a_axis;
    Eigen::VectorXd b_axis;
    Eigen::MatrixXd mse;  // (a_axis.size() x b_axis.size())
};

/// Entry (i, j) is the post-adaptation target MSE of task (a_i, b_j), whose
/// data is seeded by its row-major index i * n_b + j, as on the test grid.
LandscapeGrid landscape(const models::ModelSpec& spec, const ParamVector& params, const Eigen::VectorXd& a_axis,
                        const Eigen::VectorXd& b_axis, const EvalSettings& s);

void write_landscape_csv(const std::filesystem::path& path, const LandscapeGrid& g);
LandscapeGrid read_landscape_csv(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct RunSummary {
    std::string label;      // e.g. principle name or swept value
    std::string principle;  // risk::to_string(PrincipleKind)
    std::uint64_t seed = 0;
    MetricsReport report;
};

struct ComparisonRow {
    std::string label;
    std::string principle;
    std::uint64_t seed = 0;
    double alpha_eval = 0.0;
    double average = 0.0;
    double worst = 0.0;
    double cvar = 0.0;
    // Paired against the expected_risk run with the same seed, if any.
    std::optional<double> delta_average;
    std::optional<double> delta_worst;
    std::optional<double> delta_cvar;
};

struct Comparison {
    std::vector<ComparisonRow> rows;
    std::vector<Histogram> histograms;  // one per run, shared edges
};

/// Requires at least two runs, all with the same alpha_eval.
Comparison compare_runs(const std::vector<RunSummary>& runs);

/// Blank delta cells mark runs without a baseline.
void write_comparison_csv(const std::filesystem::path& path, const std::vector<ComparisonRow>& rows);
std::vector<ComparisonRow> read_comparison_csv(const std::filesystem::path& path);

}  // namespace drml::eval

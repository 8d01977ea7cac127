#pragma once

// Task distributions: sinusoids with an easy/hard training mixture and a
// fixed test grid, and Gaussian-process curves for the neural-process model.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "drml/points.hpp"
#include "drml/rng.hpp"

namespace drml::tasks {

/// f(x) = amplitude * sin(x - phase)
struct SineTask {
    double amplitude = 1.0;
    double phase = 0.0;

    double operator()(double x) const;
};

struct TaskData {
    PointSet context;
    PointSet target;
};

struct SineDistConfig {
    double p_hard = 0.1;
    double easy_min = 0.1, easy_max = 1.05;
    double hard_min = 4.95, hard_max = 5.0;
    double phase_min = 0.0, phase_max = 3.14159265358979323846;  // [0, pi]
    double x_min = -5.0, x_max = 5.0;
    int grid_amplitudes = 49;
    int grid_phases = 10;

    void validate() const;
};

SineTask sample_train_task(Rng& rng, const SineDistConfig& cfg);

/// Amplitudes evenly spaced over [0.1, 5], phases over [0, 2 pi]; row-major in
/// amplitude (task index = i_a * n_b + i_b). The grid must hold 490 tasks.
std::vector<SineTask> build_test_grid(const SineDistConfig& cfg);

/// Test-grid axes, in the order build_test_grid enumerates them.
Eigen::VectorXd grid_amplitudes(int n);
Eigen::VectorXd grid_phases(int n);

/// K context and M target x i.i.d. uniform on [x_min, x_max], y exact.
TaskData sample_task_data(const SineTask& task, int K, int M, Rng& rng, double x_min = -5.0, double x_max = 5.0);

/// Exact sine values at the given inputs.
PointSet sine_points(const SineTask& task, const Eigen::VectorXd& x);

void write_task_csv(const std::filesystem::path& path, const std::vector<SineTask>& tasks);

// ---------------------------------------------------------------------------

struct GPConfig {
    int grid_size = 400;
    double x_min = -2.0, x_max = 2.0;
    double length_scale = 0.4;
    double signal_variance = 1.0;
    int min_context = 3;
    int max_context = 50;
    double jitter = 1e-6;

    void validate() const;
};

struct GPCurveTask {
    Eigen::VectorXd x;
    Eigen::VectorXd y;
    double length_scale = 0.0;
    double signal_variance = 0.0;
};

/// signal_variance * exp(-(x - x')^2 / (2 length_scale^2))
Eigen::MatrixXd rbf_kernel(const Eigen::VectorXd& x, double length_scale, double signal_variance);

/// Lower Cholesky factor of K + jitter I, escalating jitter x10 up to three
/// times. Throws std::runtime_error if every attempt fails.
Eigen::MatrixXd jittered_cholesky(const Eigen::MatrixXd& K, double jitter);

/// Curve on the configured grid; context drawn without replacement from the
/// grid with a uniform count in [min_context, max_context]; target = whole grid.
std::pair<GPCurveTask, TaskData> sample_gp_task(Rng& rng, const GPConfig& cfg);

/// Same, reusing a factor from jittered_cholesky for the configured grid.
std::pair<GPCurveTask, TaskData> sample_gp_task(Rng& rng, const GPConfig& cfg, const Eigen::MatrixXd& chol);

}  // namespace drml::tasks

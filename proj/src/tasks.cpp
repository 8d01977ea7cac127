#include "drml/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include <Eigen/Cholesky>

namespace drml::tasks {

double SineTask::operator()(double x) const { return amplitude * std::sin(x - phase); }

void SineDistConfig::validate() const {
    if (!(p_hard >= 0.0 && p_hard <= 1.0)) throw std::invalid_argument("p_hard must lie in [0, 1]");
    if (!(easy_min <= easy_max && hard_min <= hard_max && phase_min <= phase_max && x_min < x_max)) {
        throw std::invalid_argument("sine distribution ranges are inverted");
    }
    if (grid_amplitudes <= 0 || grid_phases <= 0 || grid_amplitudes * grid_phases != 490) {
        throw std::invalid_argument("test grid shape " + std::to_string(grid_amplitudes) + "x" +
                                    std::to_string(grid_phases) + " does not hold 490 tasks");
    }
}

SineTask sample_train_task(Rng& rng, const SineDistConfig& cfg) {
    const bool hard = uniform(rng, 0.0, 1.0) < cfg.p_hard;
    SineTask t;
    t.amplitude = hard ? uniform(rng, cfg.hard_min, cfg.hard_max) : uniform(rng, cfg.easy_min, cfg.easy_max);
    t.phase = uniform(rng, cfg.phase_min, cfg.phase_max);
    return t;
}

namespace {

Eigen::VectorXd even(double lo, double hi, int n) {
    if (n == 1) return Eigen::VectorXd::Constant(1, lo);
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = lo + (hi - lo) * double(i) / double(n - 1);
    v[n - 1] = hi;
    return v;
}

}  // namespace

Eigen::VectorXd grid_amplitudes(int n) { return even(0.1, 5.0, n); }
Eigen::VectorXd grid_phases(int n) { return even(0.0, 2.0 * std::numbers::pi, n); }

std::vector<SineTask> build_test_grid(const SineDistConfig& cfg) {
    cfg.validate();
    const auto a = grid_amplitudes(cfg.grid_amplitudes);
    const auto b = grid_phases(cfg.grid_phases);
    std::vector<SineTask> out;
    out.reserve(490);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        for (Eigen::Index j = 0; j < b.size(); ++j) out.push_back({a[i], b[j]});
    }
    return out;
}

PointSet sine_points(const SineTask& task, const Eigen::VectorXd& x) {
    PointSet p{x, Eigen::VectorXd(x.size())};
    for (Eigen::Index i = 0; i < x.size(); ++i) p.y[i] = task(x[i]);
    return p;
}

TaskData sample_task_data(const SineTask& task, int K, int M, Rng& rng, double x_min, double x_max) {
    if (K < 1 || M < 1) throw std::invalid_argument("sample_task_data: K and M must be at least 1");
    Eigen::VectorXd xc(K), xt(M);
    for (int i = 0; i < K; ++i) xc[i] = uniform(rng, x_min, x_max);
    for (int i = 0; i < M; ++i) xt[i] = uniform(rng, x_min, x_max);
    return {sine_points(task, xc), sine_points(task, xt)};
}

void write_task_csv(const std::filesystem::path& path, const std::vector<SineTask>& tasks) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "task_index,a,b\n";
    char buf[96];
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", i, tasks[i].amplitude, tasks[i].phase);
        os << buf;
    }
}

// ---------------------------------------------------------------------------

void GPConfig::validate() const {
    if (grid_size < 1) throw std::invalid_argument("gp grid_size must be positive");
    if (!(x_min < x_max)) throw std::invalid_argument("gp x range is empty");
    if (!(length_scale > 0.0)) throw std::invalid_argument("gp length_scale must be positive");
    if (!(signal_variance >= 0.0)) throw std::invalid_argument("gp signal_variance must be non-negative");
    if (min_context < 1 || max_context < min_context || max_context > grid_size) {
        throw std::invalid_argument("gp context range must satisfy 1 <= min <= max <= grid_size");
    }
    if (!(jitter > 0.0)) throw std::invalid_argument("gp jitter must be positive");
}

Eigen::MatrixXd rbf_kernel(const Eigen::VectorXd& x, double length_scale, double signal_variance) {
    const Eigen::Index n = x.size();
    Eigen::MatrixXd K(n, n);
    const double inv = 1.0 / (2.0 * length_scale * length_scale);
    for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const double d = x[i] - x[j];
            K(i, j) = signal_variance * std::exp(-d * d * inv);
        }
    }
    return K;
}

Eigen::MatrixXd jittered_cholesky(const Eigen::MatrixXd& K, double jitter) {
    double j = jitter;
    for (int attempt = 0; attempt <= 3; ++attempt, j *= 10.0) {
        Eigen::MatrixXd A = K;
        A.diagonal().array() += j;
        Eigen::LLT<Eigen::MatrixXd> llt(A);
        if (llt.info() == Eigen::Success) return llt.matrixL();
    }
    throw std::runtime_error("covariance factorization failed after jitter escalation");
}

std::pair<GPCurveTask, TaskData> sample_gp_task(Rng& rng, const GPConfig& cfg) {
    cfg.validate();
    const Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(cfg.grid_size, cfg.x_min, cfg.x_max);
    return sample_gp_task(rng, cfg, jittered_cholesky(rbf_kernel(x, cfg.length_scale, cfg.signal_variance), cfg.jitter));
}

std::pair<GPCurveTask, TaskData> sample_gp_task(Rng& rng, const GPConfig& cfg, const Eigen::MatrixXd& chol) {
    cfg.validate();
    if (chol.rows() != cfg.grid_size || chol.cols() != cfg.grid_size) {
        throw std::invalid_argument("sample_gp_task: factor does not match the grid size");
    }
    GPCurveTask curve;
    curve.x = Eigen::VectorXd::LinSpaced(cfg.grid_size, cfg.x_min, cfg.x_max);
    curve.length_scale = cfg.length_scale;
    curve.signal_variance = cfg.signal_variance;

    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd z(cfg.grid_size);
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = normal(rng);
    curve.y = chol.triangularView<Eigen::Lower>() * z;

    const int count = std::uniform_int_distribution<int>(cfg.min_context, cfg.max_context)(rng);
    std::vector<int> idx(cfg.grid_size);
    std::iota(idx.begin(), idx.end(), 0);
    // partial Fisher-Yates: first `count` entries are a uniform subset
    for (int i = 0; i < count; ++i) {
        const int j = std::uniform_int_distribution<int>(i, cfg.grid_size - 1)(rng);
        std::swap(idx[i], idx[j]);
    }
    std::sort(idx.begin(), idx.begin() + count);

    TaskData data;
    data.context.x.resize(count);
    data.context.y.resize(count);
    for (int i = 0; i < count; ++i) {
        data.context.x[i] = curve.x[idx[i]];
        data.context.y[i] = curve.y[idx[i]];
    }
    data.target = {curve.x, curve.y};
    return {std::move(curve), std::move(data)};
}

}  // namespace drml::tasks

#pragma once

// Meta-training loops. Every principle shares one step structure: adapt each
// task, evaluate post-adaptation target losses, map the loss batch to task
// weights, and apply the weighted sum of per-task meta-gradients.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "drml/diff.hpp"
#include "drml/models.hpp"
#include "drml/params.hpp"
#include "drml/risk.hpp"
#include "drml/tasks.hpp"

namespace drml::train {

/// A training failure annotated with the iteration and task it came from.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class OptimizerKind { sgd, adam };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const;
};

class Optimizer {
public:
    Optimizer(const OptimizerConfig& cfg, Eigen::Index size);

    /// Applies one update in place; throws if it would leave the finite range.
    void step(ParamVector& params, const GradVector& grad);

    std::size_t steps() const { return t_; }

private:
    OptimizerConfig cfg_;
    Eigen::VectorXd m_;
    Eigen::VectorXd v_;
    std::size_t t_ = 0;
};

struct TrainConfig {
    models::ModelSpec model = models::ModelSpec::sinusoid_mlp();
    risk::PrincipleConfig principle;
    double inner_lr = 0.01;
    int inner_steps = 1;
    OptimizerConfig optimizer;
    std::size_t meta_batch = 25;
    int shots = 5;    // K
    int targets = 5;  // M
    std::size_t iterations = 20000;
    std::uint64_t seed = 0;
    std::size_t eval_every = 0;        // 0: evaluate only after the last iteration
    std::size_t checkpoint_every = 0;  // 0: checkpoint only after the last iteration
    diff::GradientMode gradient_mode = diff::GradientMode::exact;

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;
};

/// One row of trace.csv.
struct TraceRecord {
    std::size_t iter = 0;
    double xi_hat = 0.0;
    double phi = 0.0;
    double mean_loss = 0.0;
    double max_loss = 0.0;
    std::size_t k = 0;
};

TraceRecord make_trace_record(std::size_t iter, const risk::RiskBatch& batch, double alpha, std::size_t k);

/// Writes the trace header and rows with 17 significant digits.
void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRecord>& trace);
std::vector<TraceRecord> read_trace_csv(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

/// params - inner_lr * grad(context_loss)(params); inner_lr = 0 returns params.
ParamVector inner_adapt(const ParamVector& params, const diff::ScalarFn& context_loss, double inner_lr);

struct OuterGradient {
    GradVector grad;
    risk::RiskBatch batch;                 // post-adaptation target losses
    std::vector<risk::TaskWeight> weights;  // ascending task index
};

/// Weighted one-step meta-gradient of an MLP over a task batch.
OuterGradient maml_outer_gradient(const TrainConfig& cfg, const ParamVector& params,
                                  const std::vector<tasks::TaskData>& batch);

/// Weighted gradient of the CNP likelihood loss over a task batch.
OuterGradient cnp_outer_gradient(const TrainConfig& cfg, const ParamVector& params,
                                 const std::vector<tasks::TaskData>& batch);

struct StepResult {
    risk::RiskBatch batch;
    TraceRecord trace;
    OuterGradient outer;
};

/// Owns the meta-parameters and optimizer state of one run.
class MetaLearner {
public:
    MetaLearner(TrainConfig cfg, ParamVector init);

    /// One outer update on `batch`; `iter` is 1-based and used for error context.
    StepResult step(const std::vector<tasks::TaskData>& batch, std::size_t iter);

    const ParamVector& params() const { return params_; }
    const TrainConfig& config() const { return cfg_; }

private:
    TrainConfig cfg_;
    ParamVector params_;
    Optimizer optimizer_;
};

struct MetaStep {
    ParamVector params;
    risk::RiskBatch batch;
    TraceRecord trace;
};

/// Functional forms of MetaLearner::step for a given optimizer state.
MetaStep maml_meta_step(const ParamVector& params, const std::vector<tasks::TaskData>& batch,
                        const TrainConfig& cfg, Optimizer& optimizer, std::size_t iter = 1);
MetaStep cnp_meta_step(const ParamVector& params, const std::vector<tasks::TaskData>& batch,
                       const TrainConfig& cfg, Optimizer& optimizer, std::size_t iter = 1);

// ---------------------------------------------------------------------------

/// Supplies the task batch for an iteration. Implementations must be pure
/// functions of (their construction arguments, iteration).
class TaskSource {
public:
    virtual ~TaskSource() = default;
    virtual std::vector<tasks::TaskData> batch(std::size_t iter, std::size_t size) const = 0;
};

/// Training sinusoids; task i of iteration t uses stream(seed, {t, i}).
class SineTaskSource : public TaskSource {
public:
    SineTaskSource(tasks::SineDistConfig dist, std::uint64_t seed, int shots, int targets);
    std::vector<tasks::TaskData> batch(std::size_t iter, std::size_t size) const override;

private:
    tasks::SineDistConfig dist_;
    std::uint64_t seed_;
    int shots_;
    int targets_;
};

/// GP curves; the grid covariance is factored once.
class GPTaskSource : public TaskSource {
public:
    GPTaskSource(tasks::GPConfig cfg, std::uint64_t seed);
    std::vector<tasks::TaskData> batch(std::size_t iter, std::size_t size) const override;

private:
    tasks::GPConfig cfg_;
    std::uint64_t seed_;
    Eigen::MatrixXd chol_;
};

struct TrainSinks {
    std::filesystem::path run_dir;  // empty: keep everything in memory
    /// Called after iterations that hit eval_every and after the last one.
    std::function<void(const ParamVector&, std::size_t iter)> on_eval;
    /// Extra JSON stored in each checkpoint sidecar.
    std::string checkpoint_metadata = "{}";
};

struct TrainResult {
    ParamVector params;
    std::vector<TraceRecord> trace;
    std::vector<std::filesystem::path> checkpoints;
};

/// Runs cfg.iterations outer steps from a seeded initialization. With a run
/// directory, writes trace.csv and checkpoint_<iter>.bin (+ .json sidecar);
/// the trace is flushed even when a step throws.
TrainResult train(const TrainConfig& cfg, const TaskSource& source, const TrainSinks& sinks = {});

/// Initial parameters for a run: init_params with stream(seed, {0xC0FFEE}).
ParamVector initial_params(const TrainConfig& cfg);

/// Computable part of the VaR-error tolerance for monotone improvement,
/// outer_lr / (1 - alpha)^2. Logged in run metadata.
double improvement_bound_factor(double lr, double alpha);

}  // namespace drml::train

#include "drml/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace drml::train {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd or adam)");
}

void OptimizerConfig::validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("optimizer.lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("optimizer.beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("optimizer.beta2 must lie in [0, 1)");
    if (!(eps > 0.0)) throw std::invalid_argument("optimizer.eps must be positive");
}

Optimizer::Optimizer(const OptimizerConfig& cfg, Eigen::Index size)
    : cfg_(cfg), m_(Eigen::VectorXd::Zero(size)), v_(Eigen::VectorXd::Zero(size)) {
    cfg_.validate();
}

void Optimizer::step(ParamVector& params, const GradVector& grad) {
    if (grad.size() != params.size() || params.size() != m_.size()) {
        throw std::invalid_argument("optimizer: gradient and parameter sizes differ");
    }
    ++t_;
    const auto& g = grad.values();
    if (cfg_.kind == OptimizerKind::sgd) {
        params.assign(params.values() - cfg_.lr * g);
        return;
    }
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * g;
    v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    const Eigen::ArrayXd mhat = m_.array() / c1;
    const Eigen::ArrayXd vhat = v_.array() / c2;
    params.assign(params.values() - (cfg_.lr * mhat / (vhat.sqrt() + cfg_.eps)).matrix());
}

void TrainConfig::validate() const {
    model.validate();
    principle.validate();
    optimizer.validate();
    if (!(inner_lr > 0.0)) throw std::invalid_argument("inner_lr must be positive");
    if (inner_steps != 1) throw std::invalid_argument("inner_steps: only a single inner gradient step is supported");
    if (meta_batch < 1) throw std::invalid_argument("meta_batch must be at least 1");
    if (shots < 1) throw std::invalid_argument("shots must be at least 1");
    if (targets < 1) throw std::invalid_argument("targets must be at least 1");
    if (iterations < 1) throw std::invalid_argument("iterations must be at least 1");
    if (principle.forced_k > meta_batch) throw std::invalid_argument("principle.forced_k exceeds meta_batch");
}

TraceRecord make_trace_record(std::size_t iter, const risk::RiskBatch& batch, double alpha, std::size_t k) {
    const auto xi = risk::estimate_var(batch, alpha);
    return {iter, xi.xi_hat, risk::surrogate_value(batch, xi.xi_hat, alpha), batch.mean(), batch.max(), k};
}

namespace {

const char* kTraceHeader = "iter,xi_hat,phi,mean_loss,max_loss,k";

std::string trace_line(const TraceRecord& r) {
    char buf[192];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%zu", r.iter, r.xi_hat, r.phi, r.mean_loss,
                  r.max_loss, r.k);
    return buf;
}

}  // namespace

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRecord>& trace) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << kTraceHeader << '\n';
    for (const auto& r : trace) os << trace_line(r) << '\n';
}

std::vector<TraceRecord> read_trace_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    if (!std::getline(is, line) || line != kTraceHeader) throw std::runtime_error("unexpected trace header in " + path.string());
    std::vector<TraceRecord> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        TraceRecord r;
        std::istringstream ss(line);
        std::string f;
        std::vector<std::string> fields;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        if (fields.size() != 6) throw std::runtime_error("malformed trace row: " + line);
        r.iter = std::stoull(fields[0]);
        r.xi_hat = std::strtod(fields[1].c_str(), nullptr);
        r.phi = std::strtod(fields[2].c_str(), nullptr);
        r.mean_loss = std::strtod(fields[3].c_str(), nullptr);
        r.max_loss = std::strtod(fields[4].c_str(), nullptr);
        r.k = std::stoull(fields[5]);
        out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------

ParamVector inner_adapt(const ParamVector& params, const diff::ScalarFn& context_loss, double inner_lr) {
    if (inner_lr < 0.0) throw std::invalid_argument("inner_adapt: negative learning rate");
    if (inner_lr == 0.0) return params;
    return diff::adapt(context_loss, params, inner_lr);
}

namespace {

[[noreturn]] void rethrow_for_task(const std::exception& e, std::size_t task, const char* stage) {
    throw TrainingError(std::string(stage) + " failed for task " + std::to_string(task) + ": " + e.what());
}

GradVector weighted_sum(const ParamVector& params, const std::vector<risk::TaskWeight>& weights,
                        const std::function<Eigen::VectorXd(std::size_t)>& task_grad) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(params.size());
    for (const auto& w : weights) {
        Eigen::VectorXd gi;
        try {
            gi = task_grad(w.task_index);
        } catch (const std::exception& e) {
            rethrow_for_task(e, w.task_index, "meta-gradient");
        }
        if (!gi.allFinite()) {
            throw TrainingError("non-finite meta-gradient for task " + std::to_string(w.task_index));
        }
        g += w.weight * gi;
    }
    return GradVector(params.layout(), std::move(g));
}

void require_model(const TrainConfig& cfg, models::ModelKind kind, const char* op) {
    if (cfg.model.kind != kind) throw std::invalid_argument(std::string(op) + ": wrong model kind for this step");
}

}  // namespace

OuterGradient maml_outer_gradient(const TrainConfig& cfg, const ParamVector& params,
                                  const std::vector<tasks::TaskData>& batch) {
    require_model(cfg, models::ModelKind::mlp, "maml_outer_gradient");
    if (batch.empty()) throw std::invalid_argument("maml_outer_gradient: empty task batch");
    const std::size_t B = batch.size();
    std::vector<diff::ScalarFn> inner(B), outer(B);
    std::vector<ParamVector> adapted(B);
    std::vector<risk::RiskEntry> entries(B);
    for (std::size_t i = 0; i < B; ++i) {
        try {
            inner[i] = models::mlp_task_loss(cfg.model, batch[i].context);
            outer[i] = models::mlp_task_loss(cfg.model, batch[i].target);
            adapted[i] = inner_adapt(params, inner[i], cfg.inner_lr);
            entries[i] = {i, diff::value(outer[i], adapted[i])};
        } catch (const std::exception& e) {
            rethrow_for_task(e, i, "inner adaptation");
        }
    }
    OuterGradient out;
    out.batch = risk::RiskBatch(std::move(entries));
    out.weights = risk::principle_weights(out.batch, cfg.principle);
    out.grad = weighted_sum(params, out.weights, [&](std::size_t i) {
        return diff::meta_gradient_at(inner[i], outer[i], params, adapted[i], cfg.inner_lr, cfg.gradient_mode)
            .grad.values();
    });
    return out;
}

OuterGradient cnp_outer_gradient(const TrainConfig& cfg, const ParamVector& params,
                                 const std::vector<tasks::TaskData>& batch) {
    require_model(cfg, models::ModelKind::cnp, "cnp_outer_gradient");
    if (batch.empty()) throw std::invalid_argument("cnp_outer_gradient: empty task batch");
    const std::size_t B = batch.size();
    std::vector<diff::ScalarFn> loss(B);
    std::vector<risk::RiskEntry> entries(B);
    for (std::size_t i = 0; i < B; ++i) {
        try {
            loss[i] = models::cnp_task_loss(cfg.model, batch[i].context, batch[i].target);
            entries[i] = {i, diff::value(loss[i], params)};
        } catch (const std::exception& e) {
            rethrow_for_task(e, i, "likelihood evaluation");
        }
    }
    OuterGradient out;
    out.batch = risk::RiskBatch(std::move(entries));
    out.weights = risk::principle_weights(out.batch, cfg.principle);
    out.grad = weighted_sum(params, out.weights,
                            [&](std::size_t i) { return diff::gradient(loss[i], params).grad.values(); });
    return out;
}

// ---------------------------------------------------------------------------

MetaLearner::MetaLearner(TrainConfig cfg, ParamVector init)
    : cfg_(std::move(cfg)), params_(std::move(init)), optimizer_(cfg_.optimizer, params_.size()) {
    cfg_.validate();
    if (params_.size() != cfg_.model.param_count()) {
        throw std::invalid_argument("MetaLearner: initial parameters do not match the model");
    }
}

StepResult MetaLearner::step(const std::vector<tasks::TaskData>& batch, std::size_t iter) {
    if (batch.size() != cfg_.meta_batch) {
        throw std::invalid_argument("task batch has " + std::to_string(batch.size()) + " tasks, config expects " +
                                    std::to_string(cfg_.meta_batch));
    }
    StepResult r;
    try {
        r.outer = cfg_.model.kind == models::ModelKind::mlp ? maml_outer_gradient(cfg_, params_, batch)
                                                            : cnp_outer_gradient(cfg_, params_, batch);
        optimizer_.step(params_, r.outer.grad);
    } catch (const std::exception& e) {
        throw TrainingError("iteration " + std::to_string(iter) + ": " + e.what());
    }
    r.batch = r.outer.batch;
    r.trace = make_trace_record(iter, r.batch, cfg_.principle.alpha, r.outer.weights.size());
    return r;
}

namespace {

MetaStep functional_step(const ParamVector& params, const std::vector<tasks::TaskData>& batch,
                         const TrainConfig& cfg, Optimizer& optimizer, std::size_t iter, models::ModelKind kind) {
    require_model(cfg, kind, kind == models::ModelKind::mlp ? "maml_meta_step" : "cnp_meta_step");
    if (batch.size() != cfg.meta_batch) throw std::invalid_argument("task batch size does not match meta_batch");
    auto outer = kind == models::ModelKind::mlp ? maml_outer_gradient(cfg, params, batch)
                                                : cnp_outer_gradient(cfg, params, batch);
    ParamVector next = params;
    optimizer.step(next, outer.grad);
    auto trace = make_trace_record(iter, outer.batch, cfg.principle.alpha, outer.weights.size());
    return {std::move(next), std::move(outer.batch), trace};
}

}  // namespace

MetaStep maml_meta_step(const ParamVector& params, const std::vector<tasks::TaskData>& batch,
                        const TrainConfig& cfg, Optimizer& optimizer, std::size_t iter) {
    return functional_step(params, batch, cfg, optimizer, iter, models::ModelKind::mlp);
}

MetaStep cnp_meta_step(const ParamVector& params, const std::vector<tasks::TaskData>& batch,
                       const TrainConfig& cfg, Optimizer& optimizer, std::size_t iter) {
    return functional_step(params, batch, cfg, optimizer, iter, models::ModelKind::cnp);
}

// ---------------------------------------------------------------------------

SineTaskSource::SineTaskSource(tasks::SineDistConfig dist, std::uint64_t seed, int shots, int targets)
    : dist_(dist), seed_(seed), shots_(shots), targets_(targets) {
    dist_.validate();
}

std::vector<tasks::TaskData> SineTaskSource::batch(std::size_t iter, std::size_t size) const {
    std::vector<tasks::TaskData> out;
    out.reserve(size);
    for (std::size_t i = 0; i < size; ++i) {
        auto rng = stream(seed_, {iter, i});
        const auto task = tasks::sample_train_task(rng, dist_);
        out.push_back(tasks::sample_task_data(task, shots_, targets_, rng, dist_.x_min, dist_.x_max));
    }
    return out;
}

GPTaskSource::GPTaskSource(tasks::GPConfig cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    cfg_.validate();
    const Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(cfg_.grid_size, cfg_.x_min, cfg_.x_max);
    chol_ = tasks::jittered_cholesky(tasks::rbf_kernel(x, cfg_.length_scale, cfg_.signal_variance), cfg_.jitter);
}

std::vector<tasks::TaskData> GPTaskSource::batch(std::size_t iter, std::size_t size) const {
    std::vector<tasks::TaskData> out;
    out.reserve(size);
    for (std::size_t i = 0; i < size; ++i) {
        auto rng = stream(seed_, {iter, i});
        out.push_back(tasks::sample_gp_task(rng, cfg_, chol_).second);
    }
    return out;
}

// ---------------------------------------------------------------------------

ParamVector initial_params(const TrainConfig& cfg) {
    auto rng = stream(cfg.seed, {0xC0FFEE});
    return models::init_params(cfg.model, rng);
}

double improvement_bound_factor(double lr, double alpha) {
    risk::check_alpha(alpha);
    return lr / ((1.0 - alpha) * (1.0 - alpha));
}

TrainResult train(const TrainConfig& cfg, const TaskSource& source, const TrainSinks& sinks) {
    cfg.validate();
    MetaLearner learner(cfg, initial_params(cfg));
    TrainResult result;
    result.trace.reserve(cfg.iterations);

    std::ofstream trace_os;
    if (!sinks.run_dir.empty()) {
        std::filesystem::create_directories(sinks.run_dir);
        trace_os.open(sinks.run_dir / "trace.csv", std::ios::trunc);
        if (!trace_os) throw std::runtime_error("cannot write trace.csv in " + sinks.run_dir.string());
        trace_os << kTraceHeader << '\n';
    }

    auto save_checkpoint = [&](std::size_t iter) {
        if (sinks.run_dir.empty()) return;
        char name[64];
        std::snprintf(name, sizeof name, "checkpoint_%06zu.bin", iter);
        const auto path = sinks.run_dir / name;
        models::write_checkpoint(path, {cfg.model, cfg.seed, iter, learner.params()}, sinks.checkpoint_metadata);
        result.checkpoints.push_back(path);
    };

    try {
        for (std::size_t iter = 1; iter <= cfg.iterations; ++iter) {
            const auto batch = source.batch(iter, cfg.meta_batch);
            const auto step = learner.step(batch, iter);
            result.trace.push_back(step.trace);
            if (trace_os.is_open()) trace_os << trace_line(step.trace) << '\n';

            const bool last = iter == cfg.iterations;
            if (last || (cfg.checkpoint_every && iter % cfg.checkpoint_every == 0)) save_checkpoint(iter);
            if (sinks.on_eval && (last || (cfg.eval_every && iter % cfg.eval_every == 0))) {
                sinks.on_eval(learner.params(), iter);
            }
        }
    } catch (...) {
        if (trace_os.is_open()) trace_os.flush();
        throw;
    }
    result.params = learner.params();
    return result;
}

}  // namespace drml::train

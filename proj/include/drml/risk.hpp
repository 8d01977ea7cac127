#pragma once

// Tail-risk estimation over batches of per-task losses.
//
// VaR is the lower alpha-quantile of the empirical distribution (an order
// statistic); CVaR is the mean of the k = max(1, floor((1 - alpha) B)) largest
// losses; the surrogate is phi(xi) = xi + E[(loss - xi)^+] / (1 - alpha).

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "drml/rng.hpp"

namespace drml::risk {

struct RiskEntry {
    std::size_t task_index = 0;
    double loss = 0.0;
};

/// Per-task losses of one batch. Losses must be finite; task indices unique.
///
/// Squared-error risks are non-negative; likelihood-based risks may be
/// negative, so the sign is not enforced here.
class RiskBatch {
public:
    RiskBatch() = default;
    explicit RiskBatch(std::vector<RiskEntry> entries);

    /// Task indices 0..n-1 in order.
    static RiskBatch from_losses(std::span<const double> losses);

    const std::vector<RiskEntry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    Eigen::VectorXd losses() const;
    double mean() const;
    double max() const;

private:
    std::vector<RiskEntry> entries_;
};

struct VarEstimate {
    double xi_hat = 0.0;
    double alpha = 0.0;
    std::size_t batch_size = 0;
};

struct TailSelection {
    std::vector<std::size_t> indices;  // task indices, ascending
    std::size_t k = 0;
    VarEstimate xi;
};

/// Throws std::invalid_argument unless 0 <= alpha < 1.
void check_alpha(double alpha);

/// max(1, floor((1 - alpha) * B)); a 1e-9 guard absorbs representation error
/// in (1 - alpha) * B so that e.g. alpha = 0.9, B = 10 gives 1, not 0.
std::size_t tail_count(double alpha, std::size_t batch_size);

/// max(1, ceil(alpha * B)) with the same guard.
std::size_t var_rank(double alpha, std::size_t batch_size);

VarEstimate estimate_var(const RiskBatch& batch, double alpha);

/// The k largest losses; ties go to the smaller task index.
TailSelection screen_tail(const RiskBatch& batch, double alpha);

/// Same selection with an explicit tail size (1 <= k <= B).
TailSelection screen_top_k(const RiskBatch& batch, std::size_t k, double alpha);

double cvar_estimate(const RiskBatch& batch, double alpha);

/// xi + sum(max(loss - xi, 0)) / ((1 - alpha) * B)
double surrogate_value(const RiskBatch& batch, double xi, double alpha);

/// max{(2 - alpha) / (1 - alpha), alpha / (1 - alpha)}
double kappa(double alpha);

// ---------------------------------------------------------------------------
// Exact quantities for finite discrete distributions

struct DiscreteDistribution {
    std::vector<double> atoms;
    std::vector<double> probs;

    /// Rejects mismatched sizes, negative probabilities, or a total that is
    /// not 1 within 1e-12.
    void validate() const;
};

/// min{l : P(loss <= l) >= alpha}
double exact_var(const DiscreteDistribution& d, double alpha);

/// Tail expectation with the fractional boundary atom:
/// (sum_{l > VaR} p l + (F(VaR) - alpha) VaR) / (1 - alpha)
double exact_cvar(const DiscreteDistribution& d, double alpha);

/// phi over the population.
double surrogate_value(const DiscreteDistribution& d, double xi, double alpha);

struct SandwichReport {
    double phi = 0.0;
    double exact_cvar = 0.0;
    double exact_var = 0.0;
    double delta = 0.0;
    double kappa = 0.0;
    bool holds = false;
};

/// Checks phi(xi_hat) - kappa * delta < CVaR <= phi(xi_hat) with
/// delta = |xi_hat - VaR|. When kappa * delta is within rounding (1e-12
/// relative) the lower bound is checked as phi <= CVaR, since both sides
/// coincide at delta = 0; otherwise it is strict with no slack. The upper
/// bound carries the 1e-12 relative slack.
SandwichReport sandwich_check(const DiscreteDistribution& population, double xi_hat, double alpha);

/// Same, with the bound constant supplied by the caller.
SandwichReport sandwich_check(const DiscreteDistribution& population, double xi_hat, double alpha,
                              double kappa_value);

// ---------------------------------------------------------------------------

/// softmax(loss / temperature) in entry order, computed with max subtraction.
std::vector<double> group_dro_weights(const RiskBatch& batch, double temperature);

/// Right-continuous step function F(x) = #{loss <= x} / B.
class EmpiricalCdf {
public:
    explicit EmpiricalCdf(const RiskBatch& batch);
    explicit EmpiricalCdf(std::vector<double> samples);

    double operator()(double x) const;
    const std::vector<double>& sorted() const { return sorted_; }

private:
    std::vector<double> sorted_;
};

// ---------------------------------------------------------------------------
// Risk-minimization principles

enum class PrincipleKind { expected_risk, worst_in_batch, cvar_two_stage, group_dro };

std::string to_string(PrincipleKind k);
PrincipleKind parse_principle(const std::string& s);

struct PrincipleConfig {
    PrincipleKind kind = PrincipleKind::cvar_two_stage;
    double alpha = 0.7;        // tail level; also the level logged for every principle
    double temperature = 1.0;  // group_dro
    std::size_t forced_k = 0;  // cvar_two_stage: if nonzero, overrides the tail size

    void validate() const;
};

struct TaskWeight {
    std::size_t task_index = 0;
    double weight = 0.0;
};

/// Maps a batch to outer-update weights, ascending task index:
/// expected_risk 1/B each; worst_in_batch 1 on the argmax; cvar_two_stage
/// 1/k on the screened tail; group_dro softmax weights.
std::vector<TaskWeight> principle_weights(const RiskBatch& batch, const PrincipleConfig& cfg);

// ---------------------------------------------------------------------------

struct AnalyticDistribution {
    std::string name;
    std::function<double(double)> quantile;  // inverse CDF on (0, 1)

    static AnalyticDistribution uniform(double lo, double hi);
    static AnalyticDistribution exponential(double rate);
};

struct QuantileErrorRow {
    double alpha = 0.0;
    std::size_t batch_size = 0;
    std::size_t trials = 0;
    double mean_abs_error = 0.0;
    double std_error = 0.0;  // standard error of mean_abs_error
};

/// Mean |xi_hat - xi*| of the order-statistic VaR over repeated batches.
std::vector<QuantileErrorRow> quantile_error_trend(const AnalyticDistribution& dist, std::span<const double> alphas,
                                                   std::span<const std::size_t> batch_sizes, std::size_t trials,
                                                   Rng& rng);

/// True if, for each alpha, every step to a larger batch keeps the mean error
/// within two combined standard errors of non-increase.
bool nonincreasing_within_noise(const std::vector<QuantileErrorRow>& table);

void write_quantile_csv(const std::filesystem::path& path, const std::vector<QuantileErrorRow>& table);

struct SandwichRow {
    std::size_t instance = 0;
    double alpha = 0.0;
    double xi_hat = 0.0;
    SandwichReport report;
};

void write_sandwich_csv(const std::filesystem::path& path, const std::vector<SandwichRow>& rows);

}  // namespace drml::risk

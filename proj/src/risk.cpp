#include "drml/risk.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace drml::risk {

namespace {

constexpr double kCountGuard = 1e-9;

void require_nonempty(const RiskBatch& batch, const char* op) {
    if (batch.empty()) throw std::invalid_argument(std::string(op) + ": empty batch");
}

// Positions into batch.entries() ordered by (loss descending, task index ascending).
std::vector<std::size_t> tail_order(const RiskBatch& batch) {
    const auto& e = batch.entries();
    std::vector<std::size_t> pos(e.size());
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    std::sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) {
        if (e[a].loss != e[b].loss) return e[a].loss > e[b].loss;
        return e[a].task_index < e[b].task_index;
    });
    return pos;
}

}  // namespace

RiskBatch::RiskBatch(std::vector<RiskEntry> entries) : entries_(std::move(entries)) {
    std::unordered_set<std::size_t> seen;
    for (const auto& e : entries_) {
        if (!std::isfinite(e.loss)) {
            throw std::invalid_argument("RiskBatch: non-finite loss for task " + std::to_string(e.task_index));
        }
        if (!seen.insert(e.task_index).second) {
            throw std::invalid_argument("RiskBatch: duplicate task index " + std::to_string(e.task_index));
        }
    }
}

RiskBatch RiskBatch::from_losses(std::span<const double> losses) {
    std::vector<RiskEntry> e;
    e.reserve(losses.size());
    for (std::size_t i = 0; i < losses.size(); ++i) e.push_back({i, losses[i]});
    return RiskBatch(std::move(e));
}

Eigen::VectorXd RiskBatch::losses() const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(entries_.size()));
    for (std::size_t i = 0; i < entries_.size(); ++i) v[static_cast<Eigen::Index>(i)] = entries_[i].loss;
    return v;
}

double RiskBatch::mean() const {
    require_nonempty(*this, "mean");
    double s = 0.0;
    for (const auto& e : entries_) s += e.loss;
    return s / double(entries_.size());
}

double RiskBatch::max() const {
    require_nonempty(*this, "max");
    double m = entries_.front().loss;
    for (const auto& e : entries_) m = std::max(m, e.loss);
    return m;
}

void check_alpha(double alpha) {
    if (!(alpha >= 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in [0, 1)");
}

std::size_t tail_count(double alpha, std::size_t batch_size) {
    check_alpha(alpha);
    const double k = std::floor((1.0 - alpha) * double(batch_size) + kCountGuard);
    return std::max<std::size_t>(1, static_cast<std::size_t>(k));
}

std::size_t var_rank(double alpha, std::size_t batch_size) {
    check_alpha(alpha);
    const double r = std::ceil(alpha * double(batch_size) - kCountGuard);
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(r, 0.0)), 1, batch_size);
}

VarEstimate estimate_var(const RiskBatch& batch, double alpha) {
    require_nonempty(batch, "estimate_var");
    std::vector<double> l(batch.size());
    for (std::size_t i = 0; i < l.size(); ++i) l[i] = batch.entries()[i].loss;
    const std::size_t r = var_rank(alpha, l.size());
    std::nth_element(l.begin(), l.begin() + std::ptrdiff_t(r - 1), l.end());
    return {l[r - 1], alpha, batch.size()};
}

TailSelection screen_top_k(const RiskBatch& batch, std::size_t k, double alpha) {
    require_nonempty(batch, "screen_tail");
    if (k < 1 || k > batch.size()) throw std::invalid_argument("screen_tail: tail size out of range");
    const auto order = tail_order(batch);
    TailSelection sel;
    sel.k = k;
    sel.xi = estimate_var(batch, alpha);
    sel.indices.reserve(k);
    for (std::size_t i = 0; i < k; ++i) sel.indices.push_back(batch.entries()[order[i]].task_index);
    std::sort(sel.indices.begin(), sel.indices.end());
    return sel;
}

TailSelection screen_tail(const RiskBatch& batch, double alpha) {
    require_nonempty(batch, "screen_tail");
    return screen_top_k(batch, tail_count(alpha, batch.size()), alpha);
}

double cvar_estimate(const RiskBatch& batch, double alpha) {
    const auto sel = screen_tail(batch, alpha);
    // sum in batch order so that k = B reproduces mean() bit for bit
    std::unordered_set<std::size_t> chosen(sel.indices.begin(), sel.indices.end());
    double s = 0.0;
    for (const auto& e : batch.entries()) {
        if (chosen.count(e.task_index)) s += e.loss;
    }
    return s / double(sel.k);
}

double surrogate_value(const RiskBatch& batch, double xi, double alpha) {
    require_nonempty(batch, "surrogate_value");
    check_alpha(alpha);
    double hinge = 0.0;
    for (const auto& e : batch.entries()) hinge += std::max(e.loss - xi, 0.0);
    return xi + hinge / ((1.0 - alpha) * double(batch.size()));
}

double kappa(double alpha) {
    check_alpha(alpha);
    return std::max((2.0 - alpha) / (1.0 - alpha), alpha / (1.0 - alpha));
}

// ---------------------------------------------------------------------------

void DiscreteDistribution::validate() const {
    if (atoms.empty() || atoms.size() != probs.size()) {
        throw std::invalid_argument("discrete distribution needs matching, non-empty atoms and probabilities");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < atoms.size(); ++i) {
        if (!std::isfinite(atoms[i])) throw std::invalid_argument("discrete distribution: non-finite atom");
        if (!(probs[i] >= 0.0)) throw std::invalid_argument("discrete distribution: negative probability");
        total += probs[i];
    }
    if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("discrete distribution: probabilities must sum to 1");
}

namespace {

// (atom, probability) pairs merged by value and sorted ascending.
std::vector<std::pair<double, double>> sorted_atoms(const DiscreteDistribution& d) {
    d.validate();
    std::map<double, double> m;
    for (std::size_t i = 0; i < d.atoms.size(); ++i) {
        if (d.probs[i] > 0.0) m[d.atoms[i]] += d.probs[i];
    }
    return {m.begin(), m.end()};
}

}  // namespace

double exact_var(const DiscreteDistribution& d, double alpha) {
    check_alpha(alpha);
    const auto a = sorted_atoms(d);
    double cum = 0.0;
    for (const auto& [l, p] : a) {
        cum += p;
        if (cum >= alpha - 1e-12) return l;
    }
    return a.back().first;
}

double exact_cvar(const DiscreteDistribution& d, double alpha) {
    const double var = exact_var(d, alpha);
    const auto a = sorted_atoms(d);
    double upper = 0.0;
    double cdf_at_var = 0.0;
    for (const auto& [l, p] : a) {
        if (l > var) {
            upper += p * l;
        } else {
            cdf_at_var += p;
        }
    }
    return (upper + (cdf_at_var - alpha) * var) / (1.0 - alpha);
}

double surrogate_value(const DiscreteDistribution& d, double xi, double alpha) {
    check_alpha(alpha);
    d.validate();
    double hinge = 0.0;
    for (std::size_t i = 0; i < d.atoms.size(); ++i) hinge += d.probs[i] * std::max(d.atoms[i] - xi, 0.0);
    return xi + hinge / (1.0 - alpha);
}

SandwichReport sandwich_check(const DiscreteDistribution& population, double xi_hat, double alpha) {
    return sandwich_check(population, xi_hat, alpha, kappa(alpha));
}

SandwichReport sandwich_check(const DiscreteDistribution& population, double xi_hat, double alpha,
                              double kappa_value) {
    SandwichReport r;
    r.phi = surrogate_value(population, xi_hat, alpha);
    r.exact_var = exact_var(population, alpha);
    r.exact_cvar = exact_cvar(population, alpha);
    r.delta = std::abs(xi_hat - r.exact_var);
    r.kappa = kappa_value;
    const double tol = 1e-12 * std::max({1.0, std::abs(r.phi), std::abs(r.exact_cvar)});
    const bool upper = r.exact_cvar <= r.phi + tol;
    // Whenever kappa * delta is resolvable the strict inequality is tested
    // as is: the true gap stays at least delta below kappa * delta.
    const bool lower = r.kappa * r.delta > tol ? (r.phi - r.kappa * r.delta < r.exact_cvar)
                                               : (r.phi <= r.exact_cvar + tol);
    r.holds = upper && lower;
    return r;
}

// ---------------------------------------------------------------------------

std::vector<double> group_dro_weights(const RiskBatch& batch, double temperature) {
    require_nonempty(batch, "group_dro_weights");
    if (!(temperature > 0.0)) throw std::invalid_argument("group_dro_weights: temperature must be positive");
    const double m = batch.max();
    std::vector<double> w(batch.size());
    double z = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = std::exp((batch.entries()[i].loss - m) / temperature);
        z += w[i];
    }
    for (auto& x : w) x /= z;
    return w;
}

EmpiricalCdf::EmpiricalCdf(const RiskBatch& batch) {
    require_nonempty(batch, "empirical_cdf");
    sorted_.reserve(batch.size());
    for (const auto& e : batch.entries()) sorted_.push_back(e.loss);
    std::sort(sorted_.begin(), sorted_.end());
}

EmpiricalCdf::EmpiricalCdf(std::vector<double> samples) : sorted_(std::move(samples)) {
    if (sorted_.empty()) throw std::invalid_argument("empirical_cdf: no samples");
    std::sort(sorted_.begin(), sorted_.end());
}

double EmpiricalCdf::operator()(double x) const {
    const auto n = std::upper_bound(sorted_.begin(), sorted_.end(), x) - sorted_.begin();
    return double(n) / double(sorted_.size());
}

// ---------------------------------------------------------------------------

std::string to_string(PrincipleKind k) {
    switch (k) {
        case PrincipleKind::expected_risk: return "expected_risk";
        case PrincipleKind::worst_in_batch: return "worst_in_batch";
        case PrincipleKind::cvar_two_stage: return "cvar_two_stage";
        case PrincipleKind::group_dro: return "group_dro";
    }
    return "?";
}

PrincipleKind parse_principle(const std::string& s) {
    if (s == "expected_risk") return PrincipleKind::expected_risk;
    if (s == "worst_in_batch") return PrincipleKind::worst_in_batch;
    if (s == "cvar_two_stage") return PrincipleKind::cvar_two_stage;
    if (s == "group_dro") return PrincipleKind::group_dro;
    throw std::invalid_argument("unknown principle '" + s +
                                "' (expected expected_risk, worst_in_batch, cvar_two_stage or group_dro)");
}

void PrincipleConfig::validate() const {
    check_alpha(alpha);
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
}

std::vector<TaskWeight> principle_weights(const RiskBatch& batch, const PrincipleConfig& cfg) {
    require_nonempty(batch, "principle_weights");
    cfg.validate();
    std::vector<TaskWeight> w;
    switch (cfg.kind) {
        case PrincipleKind::expected_risk: {
            const double each = 1.0 / double(batch.size());
            for (const auto& e : batch.entries()) w.push_back({e.task_index, each});
            break;
        }
        case PrincipleKind::worst_in_batch: {
            const auto sel = screen_top_k(batch, 1, cfg.alpha);
            w.push_back({sel.indices.front(), 1.0});
            break;
        }
        case PrincipleKind::cvar_two_stage: {
            const std::size_t k = cfg.forced_k ? cfg.forced_k : tail_count(cfg.alpha, batch.size());
            const auto sel = screen_top_k(batch, k, cfg.alpha);
            const double each = 1.0 / double(sel.k);
            for (auto i : sel.indices) w.push_back({i, each});
            break;
        }
        case PrincipleKind::group_dro: {
            const auto p = group_dro_weights(batch, cfg.temperature);
            for (std::size_t i = 0; i < p.size(); ++i) w.push_back({batch.entries()[i].task_index, p[i]});
            break;
        }
    }
    std::sort(w.begin(), w.end(), [](const TaskWeight& a, const TaskWeight& b) { return a.task_index < b.task_index; });
    return w;
}

// ---------------------------------------------------------------------------

AnalyticDistribution AnalyticDistribution::uniform(double lo, double hi) {
    return {"uniform", [lo, hi](double u) { return lo + (hi - lo) * u; }};
}

AnalyticDistribution AnalyticDistribution::exponential(double rate) {
    return {"exponential", [rate](double u) { return -std::log1p(-u) / rate; }};
}

std::vector<QuantileErrorRow> quantile_error_trend(const AnalyticDistribution& dist, std::span<const double> alphas,
                                                   std::span<const std::size_t> batch_sizes, std::size_t trials,
                                                   Rng& rng) {
    if (trials == 0) throw std::invalid_argument("quantile_error_trend: trials must be positive");
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::vector<QuantileErrorRow> out;
    std::vector<double> sample;
    for (double alpha : alphas) {
        check_alpha(alpha);
        const double truth = dist.quantile(alpha);
        for (std::size_t B : batch_sizes) {
            if (B == 0) throw std::invalid_argument("quantile_error_trend: batch size must be positive");
            const std::size_t r = var_rank(alpha, B);
            double s = 0.0, s2 = 0.0;
            for (std::size_t t = 0; t < trials; ++t) {
                sample.resize(B);
                for (auto& x : sample) x = dist.quantile(u01(rng));
                std::nth_element(sample.begin(), sample.begin() + std::ptrdiff_t(r - 1), sample.end());
                const double err = std::abs(sample[r - 1] - truth);
                s += err;
                s2 += err * err;
            }
            const double n = double(trials);
            const double mean = s / n;
            const double var = trials > 1 ? std::max(0.0, (s2 - n * mean * mean) / (n - 1.0)) : 0.0;
            out.push_back({alpha, B, trials, mean, std::sqrt(var / n)});
        }
    }
    return out;
}

bool nonincreasing_within_noise(const std::vector<QuantileErrorRow>& table) {
    std::map<double, std::vector<QuantileErrorRow>> by_alpha;
    for (const auto& r : table) by_alpha[r.alpha].push_back(r);
    for (auto& [alpha, rows] : by_alpha) {
        std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.batch_size < b.batch_size; });
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const double noise = 2.0 * std::hypot(rows[i - 1].std_error, rows[i].std_error);
            if (rows[i].mean_abs_error > rows[i - 1].mean_abs_error + noise) return false;
        }
    }
    return true;
}

void write_quantile_csv(const std::filesystem::path& path, const std::vector<QuantileErrorRow>& table) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "alpha,batch_size,trials,mean_abs_error,std_error\n";
    char buf[160];
    for (const auto& r : table) {
        std::snprintf(buf, sizeof buf, "%.17g,%zu,%zu,%.17g,%.17g\n", r.alpha, r.batch_size, r.trials,
                      r.mean_abs_error, r.std_error);
        os << buf;
    }
}

void write_sandwich_csv(const std::filesystem::path& path, const std::vector<SandwichRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << "instance,alpha,xi_hat,exact_var,delta,kappa,phi,exact_cvar,holds\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n", r.instance, r.alpha,
                      r.xi_hat, r.report.exact_var, r.report.delta, r.report.kappa, r.report.phi,
                      r.report.exact_cvar, r.report.holds ? 1 : 0);
        os << buf;
    }
}

}  // namespace drml::risk

#include "drml/evalreport.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "drml/diff.hpp"
#include "drml/risk.hpp"

namespace drml::eval {

using nlohmann::json;

std::string to_string(AdaptKind k) { return k == AdaptKind::maml_one_step ? "maml_one_step" : "cnp_condition"; }

AdaptKind parse_adapt_kind(const std::string& s) {
    if (s == "maml_one_step") return AdaptKind::maml_one_step;
    if (s == "cnp_condition") return AdaptKind::cnp_condition;
    throw std::invalid_argument("unknown adaptation '" + s + "'");
}

MetricsReport metrics_from_losses(std::vector<double> losses, double alpha_eval) {
    if (losses.empty()) throw std::invalid_argument("metrics need at least one task");
    const auto batch = risk::RiskBatch::from_losses(losses);
    MetricsReport r;
    r.average = batch.mean();
    r.worst = batch.max();
    r.cvar = risk::cvar_estimate(batch, alpha_eval);
    r.alpha_eval = alpha_eval;
    r.n_tasks = losses.size();
    r.per_task_losses = std::move(losses);
    return r;
}

std::vector<tasks::TaskData> sine_eval_data(const std::vector<tasks::SineTask>& tasks, const EvalSettings& s) {
    std::vector<tasks::TaskData> out;
    out.reserve(tasks.size());
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        auto rng = stream(s.seed, {i});
        out.push_back(tasks::sample_task_data(tasks[i], s.shots, s.targets, rng, s.x_min, s.x_max));
    }
    return out;
}

std::vector<tasks::TaskData> gp_eval_data(const tasks::GPConfig& cfg, std::size_t n, std::uint64_t seed) {
    cfg.validate();
    const Eigen::VectorXd x = Eigen::VectorXd::LinSpaced(cfg.grid_size, cfg.x_min, cfg.x_max);
    const Eigen::MatrixXd chol =
        tasks::jittered_cholesky(tasks::rbf_kernel(x, cfg.length_scale, cfg.signal_variance), cfg.jitter);
    std::vector<tasks::TaskData> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto rng = stream(seed, {i});
        out.push_back(tasks::sample_gp_task(rng, cfg, chol).second);
    }
    return out;
}

std::vector<double> task_losses(const models::ModelSpec& spec, const ParamVector& params,
                                const std::vector<tasks::TaskData>& data, const EvalSettings& s) {
    const bool maml = s.adapt == AdaptKind::maml_one_step;
    if (maml != (spec.kind == models::ModelKind::mlp)) {
        throw std::invalid_argument("adaptation " + to_string(s.adapt) + " does not fit a " +
                                    models::to_string(spec.kind) + " model");
    }
    std::vector<double> out(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        try {
            if (maml) {
                const auto inner = models::mlp_task_loss(spec, data[i].context);
                const auto adapted = s.inner_lr == 0.0 ? params : diff::adapt(inner, params, s.inner_lr);
                out[i] = diff::value(models::mlp_task_loss(spec, data[i].target), adapted);
            } else {
                out[i] = diff::value(models::cnp_task_loss(spec, data[i].context, data[i].target), params);
            }
        } catch (const std::exception& e) {
            throw std::runtime_error("evaluation failed for task " + std::to_string(i) + ": " + e.what());
        }
        if (!std::isfinite(out[i])) throw std::runtime_error("non-finite loss for task " + std::to_string(i));
    }
    return out;
}

MetricsReport evaluate_metrics(const models::ModelSpec& spec, const ParamVector& params,
                               const std::vector<tasks::TaskData>& data, const EvalSettings& s) {
    if (data.empty()) throw std::invalid_argument("evaluate_metrics: empty task set");
    return metrics_from_losses(task_losses(spec, params, data, s), s.alpha_eval);
}

MetricsReport evaluate_metrics(const models::ModelSpec& spec, const ParamVector& params,
                               const std::vector<tasks::SineTask>& tasks, const EvalSettings& s) {
    if (tasks.empty()) throw std::invalid_argument("evaluate_metrics: empty task set");
    return evaluate_metrics(spec, params, sine_eval_data(tasks, s), s);
}

std::string to_json(const MetricsReport& r) {
    json j;
    j["average"] = r.average;
    j["worst"] = r.worst;
    j["cvar"] = r.cvar;
    j["alpha_eval"] = r.alpha_eval;
    j["n_tasks"] = r.n_tasks;
    j["per_task_losses"] = r.per_task_losses;
    return j.dump(2);
}

MetricsReport metrics_from_json(const std::string& text) {
    const auto j = json::parse(text);
    MetricsReport r;
    r.average = j.at("average").get<double>();
    r.worst = j.at("worst").get<double>();
    r.cvar = j.at("cvar").get<double>();
    r.alpha_eval = j.at("alpha_eval").get<double>();
    r.n_tasks = j.at("n_tasks").get<std::size_t>();
    r.per_task_losses = j.at("per_task_losses").get<std::vector<double>>();
    if (r.per_task_losses.size() != r.n_tasks) throw std::runtime_error("metrics: n_tasks does not match losses");
    return r;
}

void write_metrics_json(const std::filesystem::path& path, const MetricsReport& r) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << to_json(r) << '\n';
}

MetricsReport read_metrics_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return metrics_from_json(ss.str());
}

// ---------------------------------------------------------------------------

namespace {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double to_double(const std::string& s) {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::runtime_error("malformed number '" + s + "'");
    return v;
}

struct CsvReader {
    std::ifstream is;
    std::filesystem::path path;

    CsvReader(const std::filesystem::path& p, const std::string& header) : is(p), path(p) {
        if (!is) throw std::runtime_error("cannot read " + p.string());
        std::string line;
        if (!std::getline(is, line) || line != header) throw std::runtime_error("unexpected header in " + p.string());
    }

    bool next(std::vector<std::string>& cells, std::size_t width) {
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            cells = split(line);
            if (cells.size() != width) throw std::runtime_error("malformed row in " + path.string() + ": " + line);
            return true;
        }
        return false;
    }
};

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    return os;
}

}  // namespace

Histogram histogram(std::span<const double> losses, std::size_t n_bins, double lo, double hi) {
    if (n_bins < 1) throw std::invalid_argument("histogram needs at least one bin");
    if (!(std::isfinite(lo) && std::isfinite(hi) && hi > lo)) throw std::invalid_argument("histogram range is empty");
    Histogram h;
    h.edges.resize(n_bins + 1);
    const double width = (hi - lo) / double(n_bins);
    for (std::size_t i = 0; i <= n_bins; ++i) h.edges[i] = lo + width * double(i);
    h.edges[n_bins] = hi;
    for (std::size_t i = 1; i <= n_bins; ++i) {
        if (!(h.edges[i] > h.edges[i - 1])) throw std::invalid_argument("histogram range too narrow for bin count");
    }
    h.counts.assign(n_bins, 0);
    for (double v : losses) {
        if (std::isnan(v)) throw std::invalid_argument("histogram of NaN");
        std::size_t bin;
        if (v <= lo) {
            bin = 0;
        } else if (v >= hi) {
            bin = n_bins - 1;
        } else {
            bin = std::min(n_bins - 1, std::size_t((v - lo) / width));
        }
        ++h.counts[bin];
    }
    h.total = losses.size();
    return h;
}

std::pair<double, double> default_range(std::span<const double> losses) {
    if (losses.empty()) return {0.0, 1.0};
    const auto batch = risk::RiskBatch::from_losses(losses);
    const double lo = std::min(0.0, *std::min_element(losses.begin(), losses.end()));
    double hi = risk::estimate_var(batch, 0.99).xi_hat;
    if (!(hi > lo)) hi = lo + 1.0;
    return {lo, hi};
}

Histogram histogram(std::span<const double> losses) {
    const auto [lo, hi] = default_range(losses);
    return histogram(losses, 30, lo, hi);
}

double mass_above(std::span<const double> losses, double threshold) {
    if (losses.empty()) return 0.0;
    const auto n = std::count_if(losses.begin(), losses.end(), [&](double v) { return v > threshold; });
    return double(n) / double(losses.size());
}

void write_histogram_csv(const std::filesystem::path& path, const Histogram& h) {
    auto os = open_out(path);
    os << "bin_lo,bin_hi,count\n";
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        os << fmt17(h.edges[i]) << ',' << fmt17(h.edges[i + 1]) << ',' << h.counts[i] << '\n';
    }
}

Histogram read_histogram_csv(const std::filesystem::path& path) {
    CsvReader in(path, "bin_lo,bin_hi,count");
    Histogram h;
    std::vector<std::string> c;
    while (in.next(c, 3)) {
        const double lo = to_double(c[0]);
        if (h.edges.empty()) {
            h.edges.push_back(lo);
        } else if (lo != h.edges.back()) {
            throw std::runtime_error("histogram bins are not contiguous in " + path.string());
        }
        h.edges.push_back(to_double(c[1]));
        h.counts.push_back(std::stoull(c[2]));
        h.total += h.counts.back();
    }
    return h;
}

// ---------------------------------------------------------------------------

LandscapeGrid landscape(const models::ModelSpec& spec, const ParamVector& params, const Eigen::VectorXd& a_axis,
                        const Eigen::VectorXd& b_axis, const EvalSettings& s) {
    if (a_axis.size() == 0 || b_axis.size() == 0) throw std::invalid_argument("landscape axes must be non-empty");
    if (s.adapt != AdaptKind::maml_one_step) throw std::invalid_argument("landscape needs one-step adaptation");
    std::vector<tasks::SineTask> grid;
    grid.reserve(std::size_t(a_axis.size() * b_axis.size()));
    for (Eigen::Index i = 0; i < a_axis.size(); ++i) {
        for (Eigen::Index j = 0; j < b_axis.size(); ++j) grid.push_back({a_axis[i], b_axis[j]});
    }
    const auto losses = task_losses(spec, params, sine_eval_data(grid, s), s);
    LandscapeGrid g{a_axis, b_axis, Eigen::MatrixXd(a_axis.size(), b_axis.size())};
    for (Eigen::Index i = 0; i < a_axis.size(); ++i) {
        for (Eigen::Index j = 0; j < b_axis.size(); ++j) g.mse(i, j) = losses[std::size_t(i * b_axis.size() + j)];
    }
    return g;
}

void write_landscape_csv(const std::filesystem::path& path, const LandscapeGrid& g) {
    auto os = open_out(path);
    os << "a,b,mse\n";
    for (Eigen::Index i = 0; i < g.a_axis.size(); ++i) {
        for (Eigen::Index j = 0; j < g.b_axis.size(); ++j) {
            os << fmt17(g.a_axis[i]) << ',' << fmt17(g.b_axis[j]) << ',' << fmt17(g.mse(i, j)) << '\n';
        }
    }
}

LandscapeGrid read_landscape_csv(const std::filesystem::path& path) {
    CsvReader in(path, "a,b,mse");
    std::vector<double> a, b, m;
    std::vector<std::string> c;
    while (in.next(c, 3)) {
        a.push_back(to_double(c[0]));
        b.push_back(to_double(c[1]));
        m.push_back(to_double(c[2]));
    }
    // Rows are row-major in a; the phase axis repeats until a changes.
    std::size_t nb = 0;
    while (nb < a.size() && a[nb] == a[0]) ++nb;
    if (nb == 0 || a.size() % nb != 0) throw std::runtime_error("landscape grid is not rectangular in " + path.string());
    const std::size_t na = a.size() / nb;
    LandscapeGrid g{Eigen::VectorXd(na), Eigen::VectorXd(nb), Eigen::MatrixXd(na, nb)};
    for (std::size_t i = 0; i < na; ++i) {
        for (std::size_t j = 0; j < nb; ++j) {
            const std::size_t r = i * nb + j;
            if (a[r] != a[i * nb] || b[r] != b[j]) {
                throw std::runtime_error("landscape grid is not rectangular in " + path.string());
            }
            g.mse(i, j) = m[r];
        }
        g.a_axis[i] = a[i * nb];
    }
    for (std::size_t j = 0; j < nb; ++j) g.b_axis[j] = b[j];
    return g;
}

// ---------------------------------------------------------------------------

Comparison compare_runs(const std::vector<RunSummary>& runs) {
    if (runs.size() < 2) throw std::invalid_argument("compare_runs needs at least two runs");
    const double alpha = runs.front().report.alpha_eval;
    for (const auto& r : runs) {
        if (r.report.alpha_eval != alpha) {
            throw std::invalid_argument("runs were evaluated at different alpha levels (" + fmt17(alpha) + " vs " +
                                        fmt17(r.report.alpha_eval) + ")");
        }
        if (r.label.find_first_of(",\n\"") != std::string::npos) {
            throw std::invalid_argument("run label '" + r.label + "' contains a CSV delimiter");
        }
    }
    const std::string baseline = risk::to_string(risk::PrincipleKind::expected_risk);
    std::map<std::uint64_t, const MetricsReport*> base;
    for (const auto& r : runs) {
        if (r.principle == baseline && !base.count(r.seed)) base[r.seed] = &r.report;
    }

    Comparison out;
    std::vector<double> pooled;
    for (const auto& r : runs) {
        ComparisonRow row{r.label, r.principle, r.seed, alpha, r.report.average, r.report.worst, r.report.cvar,
                          {}, {}, {}};
        if (auto it = base.find(r.seed); it != base.end()) {
            row.delta_average = r.report.average - it->second->average;
            row.delta_worst = r.report.worst - it->second->worst;
            row.delta_cvar = r.report.cvar - it->second->cvar;
        }
        out.rows.push_back(std::move(row));
        pooled.insert(pooled.end(), r.report.per_task_losses.begin(), r.report.per_task_losses.end());
    }
    const auto [lo, hi] = default_range(pooled);
    for (const auto& r : runs) out.histograms.push_back(histogram(r.report.per_task_losses, 30, lo, hi));
    return out;
}

namespace {

const char* kComparisonHeader =
    "label,principle,seed,alpha_eval,average,worst,cvar,delta_average,delta_worst,delta_cvar";

std::string opt17(const std::optional<double>& v) { return v ? fmt17(*v) : std::string(); }

std::optional<double> parse_opt(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return to_double(s);
}

}  // namespace

void write_comparison_csv(const std::filesystem::path& path, const std::vector<ComparisonRow>& rows) {
    auto os = open_out(path);
    os << kComparisonHeader << '\n';
    for (const auto& r : rows) {
        os << r.label << ',' << r.principle << ',' << r.seed << ',' << fmt17(r.alpha_eval) << ',' << fmt17(r.average)
           << ',' << fmt17(r.worst) << ',' << fmt17(r.cvar) << ',' << opt17(r.delta_average) << ','
           << opt17(r.delta_worst) << ',' << opt17(r.delta_cvar) << '\n';
    }
}

std::vector<ComparisonRow> read_comparison_csv(const std::filesystem::path& path) {
    CsvReader in(path, kComparisonHeader);
    std::vector<ComparisonRow> rows;
    std::vector<std::string> c;
    while (in.next(c, 10)) {
        rows.push_back({c[0], c[1], std::stoull(c[2]), to_double(c[3]), to_double(c[4]), to_double(c[5]),
                        to_double(c[6]), parse_opt(c[7]), parse_opt(c[8]), parse_opt(c[9])});
    }
    return rows;
}

}  // namespace drml::eval

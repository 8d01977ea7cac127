#include "drml/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace drml::config {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(TaskFamily f) { return f == TaskFamily::sinusoid ? "sinusoid" : "gp"; }

namespace {

TaskFamily parse_family(const std::string& s) {
    if (s == "sinusoid") return TaskFamily::sinusoid;
    if (s == "gp") return TaskFamily::gp;
    throw std::invalid_argument("unknown task family '" + s + "' (expected sinusoid or gp)");
}

// Walks one JSON object, remembers which keys were read and rejects the rest.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    std::string key_path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    bool has(const char* key) const { return j_.contains(key); }

    Section child(const char* key, bool required) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            if (required) throw ConfigError(key_path(key), "missing required field");
            return Section(empty_, key_path(key));
        }
        return Section(j_.at(key), key_path(key));
    }

    template <class T>
    void get(const char* key, T& out, bool required = false) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            if (required) throw ConfigError(key_path(key), "missing required field");
            return;
        }
        convert(j_.at(key), key_path(key), out);
    }

    template <class T, class Parse>
    void get_enum(const char* key, T& out, Parse parse, bool required = false) {
        std::string s;
        get(key, s, required);
        if (!j_.contains(key)) return;
        try {
            out = parse(s);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(key_path(key), e.what());
        }
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError(key_path(it.key().c_str()), "unknown key");
        }
    }

private:
    static void convert(const json& v, const std::string& where, double& out) {
        if (!v.is_number()) throw ConfigError(where, "expected a number");
        out = v.get<double>();
        if (!std::isfinite(out)) throw ConfigError(where, "must be finite");
    }
    static void convert(const json& v, const std::string& where, int& out) {
        if (!v.is_number_integer()) throw ConfigError(where, "expected an integer");
        out = v.get<int>();
    }
    static void convert(const json& v, const std::string& where, std::uint64_t& out) {
        if (!v.is_number_unsigned()) throw ConfigError(where, "expected a non-negative integer");
        out = v.get<std::uint64_t>();
    }
    static void convert(const json& v, const std::string& where, std::string& out) {
        if (!v.is_string()) throw ConfigError(where, "expected a string");
        out = v.get<std::string>();
    }
    template <class T>
    static void convert(const json& v, const std::string& where, std::vector<T>& out) {
        if (!v.is_array()) throw ConfigError(where, "expected an array");
        out.clear();
        for (std::size_t i = 0; i < v.size(); ++i) {
            T x{};
            convert(v[i], where + "[" + std::to_string(i) + "]", x);
            out.push_back(x);
        }
    }

    static inline const json empty_ = json::object();
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

template <class F>
void wrap(const char* field, F&& f) {
    try {
        f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(field, e.what());
    }
}

}  // namespace

void ExperimentConfig::validate() const {
    if (seeds.empty()) throw ConfigError("seeds", "at least one seed is required");
    if (eval.alphas.empty()) throw ConfigError("eval.alphas", "at least one alpha is required");
    for (double a : eval.alphas) wrap("eval.alphas", [&] { risk::check_alpha(a); });
    if (eval.gp_tasks < 1) throw ConfigError("eval.gp_tasks", "must be at least 1");
    wrap("model", [&] { train.model.validate(); });
    wrap("principle", [&] { train.principle.validate(); });
    wrap("optimizer", [&] { train.optimizer.validate(); });
    wrap("train", [&] { train.validate(); });
    if (family == TaskFamily::sinusoid) {
        wrap("task.sinusoid", [&] { sinusoid.validate(); });
        if (train.model.kind != models::ModelKind::mlp) throw ConfigError("model.kind", "sinusoid tasks need an mlp");
        if (train.model.widths.front() != 1 || train.model.widths.back() != 1) {
            throw ConfigError("model.widths", "sinusoid regression needs scalar input and output");
        }
    } else {
        wrap("task.gp", [&] { gp.validate(); });
        if (train.model.kind != models::ModelKind::cnp) throw ConfigError("model.kind", "gp tasks need a cnp");
    }
}

ExperimentConfig parse_config(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError("<root>", std::string("malformed JSON: ") + e.what());
    }
    ExperimentConfig c;
    Section top(root, "");
    top.get("name", c.name);
    top.get("output_dir", c.output_dir);
    top.get("seeds", c.seeds, true);

    {
        auto t = top.child("task", true);
        t.get_enum("family", c.family, parse_family, true);
        auto s = t.child("sinusoid", false);
        s.get("p_hard", c.sinusoid.p_hard);
        s.get("easy_min", c.sinusoid.easy_min);
        s.get("easy_max", c.sinusoid.easy_max);
        s.get("hard_min", c.sinusoid.hard_min);
        s.get("hard_max", c.sinusoid.hard_max);
        s.get("phase_min", c.sinusoid.phase_min);
        s.get("phase_max", c.sinusoid.phase_max);
        s.get("x_min", c.sinusoid.x_min);
        s.get("x_max", c.sinusoid.x_max);
        s.get("grid_amplitudes", c.sinusoid.grid_amplitudes);
        s.get("grid_phases", c.sinusoid.grid_phases);
        s.finish();
        auto g = t.child("gp", false);
        g.get("grid_size", c.gp.grid_size);
        g.get("x_min", c.gp.x_min);
        g.get("x_max", c.gp.x_max);
        g.get("length_scale", c.gp.length_scale);
        g.get("signal_variance", c.gp.signal_variance);
        g.get("min_context", c.gp.min_context);
        g.get("max_context", c.gp.max_context);
        g.get("jitter", c.gp.jitter);
        g.finish();
        t.finish();
    }
    {
        auto m = top.child("model", true);
        models::ModelKind kind{};
        m.get_enum("kind", kind, models::parse_model_kind, true);
        c.train.model = kind == models::ModelKind::mlp ? models::ModelSpec::sinusoid_mlp()
                                                       : models::ModelSpec::default_cnp();
        m.get_enum("activation", c.train.model.activation, models::parse_activation);
        m.get("widths", c.train.model.widths);
        m.get("encoder", c.train.model.encoder);
        m.get("decoder", c.train.model.decoder);
        m.get("variance_floor", c.train.model.variance_floor);
        m.finish();
    }
    {
        auto p = top.child("principle", true);
        p.get_enum("kind", c.train.principle.kind, risk::parse_principle, true);
        p.get("alpha", c.train.principle.alpha);
        p.get("temperature", c.train.principle.temperature);
        std::uint64_t forced = c.train.principle.forced_k;
        p.get("forced_k", forced);
        c.train.principle.forced_k = forced;
        p.finish();
    }
    {
        auto t = top.child("train", true);
        std::uint64_t iterations = 0, meta_batch = c.train.meta_batch, eval_every = c.train.eval_every,
                      checkpoint_every = c.train.checkpoint_every;
        t.get("iterations", iterations, true);
        t.get("meta_batch", meta_batch);
        t.get("eval_every", eval_every);
        t.get("checkpoint_every", checkpoint_every);
        c.train.iterations = iterations;
        c.train.meta_batch = meta_batch;
        c.train.eval_every = eval_every;
        c.train.checkpoint_every = checkpoint_every;
        t.get("inner_lr", c.train.inner_lr);
        t.get("inner_steps", c.train.inner_steps);
        t.get("shots", c.train.shots);
        t.get("targets", c.train.targets);
        t.get_enum("gradient_mode", c.train.gradient_mode, diff::parse_gradient_mode);
        t.finish();
    }
    {
        auto o = top.child("optimizer", false);
        o.get_enum("kind", c.train.optimizer.kind, train::parse_optimizer);
        o.get("lr", c.train.optimizer.lr);
        o.get("beta1", c.train.optimizer.beta1);
        o.get("beta2", c.train.optimizer.beta2);
        o.get("eps", c.train.optimizer.eps);
        o.finish();
    }
    {
        auto e = top.child("eval", false);
        e.get("alphas", c.eval.alphas);
        e.get("seed", c.eval.seed);
        std::uint64_t n = c.eval.gp_tasks;
        e.get("gp_tasks", n);
        c.eval.gp_tasks = n;
        e.finish();
    }
    top.finish();
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("<file>", "cannot read " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

std::string to_json(const ExperimentConfig& c) {
    ordered_json j;
    j["name"] = c.name;
    j["output_dir"] = c.output_dir;
    j["seeds"] = c.seeds;
    const auto& s = c.sinusoid;
    const auto& g = c.gp;
    j["task"] = {
        {"family", to_string(c.family)},
        {"sinusoid",
         {{"p_hard", s.p_hard}, {"easy_min", s.easy_min}, {"easy_max", s.easy_max}, {"hard_min", s.hard_min},
          {"hard_max", s.hard_max}, {"phase_min", s.phase_min}, {"phase_max", s.phase_max}, {"x_min", s.x_min},
          {"x_max", s.x_max}, {"grid_amplitudes", s.grid_amplitudes}, {"grid_phases", s.grid_phases}}},
        {"gp",
         {{"grid_size", g.grid_size}, {"x_min", g.x_min}, {"x_max", g.x_max}, {"length_scale", g.length_scale},
          {"signal_variance", g.signal_variance}, {"min_context", g.min_context}, {"max_context", g.max_context},
          {"jitter", g.jitter}}},
    };
    const auto& m = c.train.model;
    j["model"] = {{"kind", models::to_string(m.kind)}, {"activation", models::to_string(m.activation)},
                  {"widths", m.widths},                {"encoder", m.encoder},
                  {"decoder", m.decoder},              {"variance_floor", m.variance_floor}};
    const auto& p = c.train.principle;
    j["principle"] = {{"kind", risk::to_string(p.kind)},
                      {"alpha", p.alpha},
                      {"temperature", p.temperature},
                      {"forced_k", p.forced_k}};
    const auto& t = c.train;
    j["train"] = {{"iterations", t.iterations},
                  {"meta_batch", t.meta_batch},
                  {"shots", t.shots},
                  {"targets", t.targets},
                  {"inner_lr", t.inner_lr},
                  {"inner_steps", t.inner_steps},
                  {"gradient_mode", diff::to_string(t.gradient_mode)},
                  {"eval_every", t.eval_every},
                  {"checkpoint_every", t.checkpoint_every}};
    const auto& o = c.train.optimizer;
    j["optimizer"] = {{"kind", train::to_string(o.kind)},
                      {"lr", o.lr},
                      {"beta1", o.beta1},
                      {"beta2", o.beta2},
                      {"eps", o.eps}};
    j["eval"] = {{"alphas", c.eval.alphas}, {"seed", c.eval.seed}, {"gp_tasks", c.eval.gp_tasks}};
    return j.dump(2);
}

// ---------------------------------------------------------------------------

std::unique_ptr<train::TaskSource> make_task_source(const ExperimentConfig& c, std::uint64_t seed) {
    if (c.family == TaskFamily::sinusoid) {
        return std::make_unique<train::SineTaskSource>(c.sinusoid, seed, c.train.shots, c.train.targets);
    }
    return std::make_unique<train::GPTaskSource>(c.gp, seed);
}

eval::EvalSettings eval_settings(const ExperimentConfig& c, double alpha) {
    eval::EvalSettings s;
    s.shots = c.train.shots;
    s.targets = c.train.targets;
    s.alpha_eval = alpha;
    s.adapt = c.family == TaskFamily::sinusoid ? eval::AdaptKind::maml_one_step : eval::AdaptKind::cnp_condition;
    s.inner_lr = c.train.inner_lr;
    s.seed = c.eval.seed;
    s.x_min = c.sinusoid.x_min;
    s.x_max = c.sinusoid.x_max;
    return s;
}

std::vector<tasks::TaskData> eval_task_data(const ExperimentConfig& c) {
    if (c.family == TaskFamily::sinusoid) {
        return eval::sine_eval_data(tasks::build_test_grid(c.sinusoid), eval_settings(c, c.eval.alphas.front()));
    }
    return eval::gp_eval_data(c.gp, c.eval.gp_tasks, c.eval.seed);
}

namespace {

std::vector<eval::MetricsReport> reports_at(const std::vector<double>& losses, const std::vector<double>& alphas) {
    std::vector<eval::MetricsReport> out;
    for (double a : alphas) out.push_back(eval::metrics_from_losses(losses, a));
    return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << text << '\n';
}

std::string numbered(const char* prefix, std::size_t n, const char* suffix) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%06zu%s", prefix, n, suffix);
    return buf;
}

}  // namespace

std::vector<eval::MetricsReport> evaluate_checkpoint(const ExperimentConfig& c, const models::Checkpoint& ckpt,
                                                     const std::vector<double>& alphas) {
    if (!(ckpt.spec == c.train.model)) throw std::invalid_argument("checkpoint model does not match the config");
    if (alphas.empty()) throw std::invalid_argument("no evaluation alphas given");
    for (double a : alphas) risk::check_alpha(a);
    const auto data = eval_task_data(c);
    return reports_at(eval::task_losses(ckpt.spec, ckpt.params, data, eval_settings(c, alphas.front())), alphas);
}

RunOutcome run_experiment(const ExperimentConfig& c, std::uint64_t seed, const std::filesystem::path& run_dir) {
    c.validate();
    ExperimentConfig snapshot = c;
    snapshot.seeds = {seed};
    snapshot.output_dir = run_dir.string();
    snapshot.train.seed = seed;

    std::filesystem::create_directories(run_dir);
    write_text(run_dir / "config.json", to_json(snapshot));
    {
        ordered_json info;
        info["name"] = c.name;
        info["seed"] = seed;
        info["param_count"] = c.train.model.param_count();
        info["tail_count"] = risk::tail_count(c.train.principle.alpha, c.train.meta_batch);
        info["improvement_bound_factor"] =
            train::improvement_bound_factor(c.train.optimizer.lr, c.train.principle.alpha);
        info["eval_alphas"] = c.eval.alphas;
        write_text(run_dir / "run_info.json", info.dump(2));
    }

    const auto data = eval_task_data(snapshot);
    const auto settings = eval_settings(snapshot, c.eval.alphas.front());
    std::vector<double> last_losses;
    std::size_t last_eval = 0;

    train::TrainSinks sinks;
    sinks.run_dir = run_dir;
    sinks.checkpoint_metadata = to_json(snapshot);
    sinks.on_eval = [&](const ParamVector& params, std::size_t iter) {
        last_losses = eval::task_losses(snapshot.train.model, params, data, settings);
        last_eval = iter;
        eval::write_metrics_json(run_dir / numbered("eval_", iter, ".json"),
                                 eval::metrics_from_losses(last_losses, settings.alpha_eval));
    };

    auto source = make_task_source(snapshot, seed);
    RunOutcome out;
    out.run_dir = run_dir;
    out.result = train::train(snapshot.train, *source, sinks);
    if (last_eval != snapshot.train.iterations) throw std::logic_error("final evaluation did not run");
    out.reports = reports_at(last_losses, c.eval.alphas);
    for (std::size_t k = 0; k < out.reports.size(); ++k) {
        eval::write_metrics_json(run_dir / ("metrics_" + std::to_string(k) + ".json"), out.reports[k]);
    }
    return out;
}

// ---------------------------------------------------------------------------

SweepAxis parse_sweep_axis(const std::string& s) {
    if (s == "alpha") return SweepAxis::alpha;
    if (s == "batch_size") return SweepAxis::batch_size;
    throw std::invalid_argument("unknown sweep axis '" + s + "' (expected alpha or batch_size)");
}

std::string to_string(SweepAxis a) { return a == SweepAxis::alpha ? "alpha" : "batch_size"; }

bool SweepResult::complete() const {
    for (const auto& s : status) {
        if (!s.ok) return false;
    }
    return true;
}

namespace {

std::string value_label(SweepAxis axis, double v) {
    char buf[64];
    if (axis == SweepAxis::batch_size) {
        std::snprintf(buf, sizeof buf, "batch_size=%.0f", v);
    } else {
        std::snprintf(buf, sizeof buf, "alpha=%g", v);
    }
    return buf;
}

}  // namespace

SweepResult run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<double>& values,
                      const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out) {
    if (values.empty()) throw std::invalid_argument("sweep needs at least one value");
    if (seeds.empty()) throw std::invalid_argument("sweep needs at least one seed");
    base.validate();

    // Build every variant before running anything, so bad values fail fast.
    std::vector<std::pair<std::string, ExperimentConfig>> variants;
    for (double v : values) {
        ExperimentConfig c = base;
        if (axis == SweepAxis::alpha) {
            c.train.principle.alpha = v;
        } else {
            if (!(v >= 1.0 && v == std::floor(v))) throw ConfigError("values", "batch sizes must be positive integers");
            c.train.meta_batch = static_cast<std::size_t>(v);
        }
        const auto label = value_label(axis, v);
        wrap("values", [&] { c.validate(); });
        variants.emplace_back(label, std::move(c));
    }

    std::filesystem::create_directories(out);
    SweepResult result;
    std::vector<eval::RunSummary> runs;
    for (const auto& [label, c] : variants) {
        for (auto seed : seeds) {
            const auto dir = out / label / ("seed_" + std::to_string(seed));
            try {
                auto o = run_experiment(c, seed, dir);
                runs.push_back({label, risk::to_string(c.train.principle.kind), seed, o.reports.front()});
                result.status.push_back({label, seed, true, ""});
            } catch (const std::exception& e) {
                result.status.push_back({label, seed, false, e.what()});
            }
        }
    }

    if (runs.size() >= 2) {
        auto cmp = eval::compare_runs(runs);
        result.rows = cmp.rows;
        for (std::size_t i = 0; i < runs.size(); ++i) {
            eval::write_histogram_csv(out / ("hist_" + runs[i].label + "_seed" + std::to_string(runs[i].seed) + ".csv"),
                                      cmp.histograms[i]);
        }
    } else if (runs.size() == 1) {
        const auto& r = runs.front();
        result.rows.push_back({r.label, r.principle, r.seed, r.report.alpha_eval, r.report.average, r.report.worst,
                               r.report.cvar, {}, {}, {}});
        eval::write_histogram_csv(out / ("hist_" + r.label + "_seed" + std::to_string(r.seed) + ".csv"),
                                  eval::histogram(r.report.per_task_losses));
    }
    eval::write_comparison_csv(out / "comparison.csv", result.rows);

    std::ofstream st(out / "sweep_status.csv", std::ios::trunc);
    st << "label,seed,status,message\n";
    for (const auto& s : result.status) {
        std::string msg = s.message;
        for (auto& ch : msg) {
            if (ch == ',' || ch == '\n') ch = ';';
        }
        st << s.label << ',' << s.seed << ',' << (s.ok ? "ok" : "failed") << ',' << msg << '\n';
    }
    return result;
}

}  // namespace drml::config

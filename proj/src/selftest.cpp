#include "drml/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "drml/diff.hpp"
#include "drml/models.hpp"
#include "drml/risk.hpp"
#include "drml/rng.hpp"
#include "drml/train.hpp"

namespace drml::selftest {

namespace {

std::string tag(const char* what, std::uint64_t seed, std::uint64_t a) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s [seed %llu, case %llu]", what, (unsigned long long)seed, (unsigned long long)a);
    return buf;
}

risk::DiscreteDistribution random_population(Rng& rng) {
    const int n = std::uniform_int_distribution<int>(1, 12)(rng);
    risk::DiscreteDistribution d;
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        // Coarse atoms now and then so ties and shared boundaries occur.
        double a = uniform(rng, -5.0, 5.0);
        if (uniform(rng, 0.0, 1.0) < 0.3) a = std::round(a);
        d.atoms.push_back(a);
        d.probs.push_back(uniform(rng, 0.05, 1.0));
        total += d.probs.back();
    }
    double acc = 0.0;
    for (int i = 0; i + 1 < n; ++i) {
        d.probs[i] /= total;
        acc += d.probs[i];
    }
    d.probs[n - 1] = 1.0 - acc;
    return d;
}

double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const double scale = std::max({a.norm(), b.norm(), 1e-8});
    return (a - b).norm() / scale;
}

Eigen::VectorXd central_differences(const diff::ScalarFn& f, const ParamVector& p) {
    Eigen::VectorXd g(p.size());
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const double h = 1e-6 * std::max(1.0, std::abs(p[i]));
        Eigen::VectorXd up = p.values(), dn = p.values();
        up[i] += h;
        dn[i] -= h;
        g[i] = (diff::value(f, ParamVector(p.layout(), up)) - diff::value(f, ParamVector(p.layout(), dn))) / (2 * h);
    }
    return g;
}

diff::ScalarFn smooth_case(int kind, Rng& rng, Eigen::Index& n) {
    auto rnd = [&](Eigen::Index r, Eigen::Index c) {
        Eigen::MatrixXd m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -1.0, 1.0);
        return m;
    };
    const int a = std::uniform_int_distribution<int>(1, 4)(rng);
    const int b = std::uniform_int_distribution<int>(1, 4)(rng);
    const int c = std::uniform_int_distribution<int>(1, 3)(rng);
    switch (kind) {
        case 0: {
            Eigen::MatrixXd x = rnd(c + 1, a);
            n = a * b + b;
            return diff::ScalarFn([x, a, b](auto& t, auto th) {
                using S = typename std::decay_t<decltype(t)>::Matrix::Scalar;
                auto h = ad::tanh(ad::affine(t.constant(x.template cast<S>()), ad::slice(th, 0, a, b),
                                             ad::slice(th, Eigen::Index(a) * b, 1, b)));
                return ad::sum(ad::square(h));
            });
        }
        case 1:
            n = a * b;
            return diff::ScalarFn([](auto&, auto th) { return ad::mean(ad::exp(ad::scale(th, 0.3))) + ad::sum(ad::softplus(th)); });
        case 2:
            n = a + b;
            return diff::ScalarFn([](auto&, auto th) { return ad::sum(ad::log(ad::shift(ad::square(th), 1.0))); });
        case 3:
            n = a * b + b * c;
            return diff::ScalarFn([a, b, c](auto&, auto th) {
                auto A = ad::slice(th, 0, a, b);
                auto B = ad::slice(th, Eigen::Index(a) * b, b, c);
                return ad::sum(ad::square(ad::matmul(A, B))) + ad::sum(A / ad::shift(ad::square(A), 1.0));
            });
        default: {
            const Eigen::Index m = a + 1;
            Eigen::MatrixXd y = rnd(m, 1);
            n = 2 * m;
            return diff::ScalarFn([y, m](auto& t, auto th) {
                using S = typename std::decay_t<decltype(t)>::Matrix::Scalar;
                auto var = ad::shift(ad::softplus(ad::slice(th, m, m, 1)), 1e-3);
                return models::gaussian_nll(ad::slice(th, 0, m, 1), var, t.constant(y.template cast<S>()));
            });
        }
    }
}

bool bitwise_equal(const ParamVector& a, const ParamVector& b) {
    return a.size() == b.size() && (a.values().array() == b.values().array()).all();
}

}  // namespace

SuiteResult sandwich_suite(const Options& opt) {
    SuiteResult r{"sandwich", 0, {}};
    auto check = [&](const risk::DiscreteDistribution& d, double xi, double alpha, const std::string& where) {
        ++r.checks;
        const auto rep = risk::sandwich_check(d, xi, alpha, risk::kappa(alpha) + opt.kappa_offset);
        if (!rep.holds) {
            char buf[200];
            std::snprintf(buf, sizeof buf, ": phi %.17g, cvar %.17g, delta %.17g, kappa %.17g", rep.phi,
                          rep.exact_cvar, rep.delta, rep.kappa);
            r.failures.push_back(where + buf);
        }
    };
    // One atom, alpha 0, xi off by one: phi = 2, CVaR = 1, and the lower bound
    // is 2 - kappa, so it holds exactly when kappa > 1.
    check({{1.0}, {1.0}}, 2.0, 0.0, "fixed instance");
    for (std::uint64_t i = 0; i < 100; ++i) {
        auto rng = stream(opt.seed, {1, i});
        const auto d = random_population(rng);
        const double alpha = uniform(rng, 0.0, 0.95);
        const double var = risk::exact_var(d, alpha);
        const double u = uniform(rng, 0.0, 1.0);
        const double xi = u < 0.2 ? var : var + uniform(rng, -3.0, 3.0);
        check(d, xi, alpha, tag("random population", opt.seed, i));
    }
    return r;
}

SuiteResult var_surrogate_suite(const Options& opt) {
    SuiteResult r{"var_surrogate", 0, {}};
    auto fail = [&](const char* what, std::uint64_t i) { r.failures.push_back(tag(what, opt.seed, i)); };
    for (std::uint64_t i = 0; i < 200; ++i) {
        auto rng = stream(opt.seed, {2, i});
        const std::size_t B = std::uniform_int_distribution<std::size_t>(1, 60)(rng);
        std::vector<double> l(B);
        for (auto& v : l) v = std::round(uniform(rng, 0.0, 10.0) * 4.0) / 4.0;  // ties on purpose
        const auto batch = risk::RiskBatch::from_losses(l);
        const double alpha = uniform(rng, 0.0, 0.99);
        const double xi = risk::estimate_var(batch, alpha).xi_hat;

        std::vector<double> sorted = l;
        std::sort(sorted.begin(), sorted.end());
        const auto rank = std::max<std::size_t>(1, std::size_t(std::ceil(alpha * double(B) - 1e-9)));
        r.checks += 4;
        if (xi != sorted[rank - 1]) fail("VaR is not the order statistic", i);

        // phi is convex and piecewise linear with kinks at the samples, so its
        // minimum over the line is the minimum over the samples.
        const double phi = risk::surrogate_value(batch, xi, alpha);
        double best = phi;
        for (double v : l) best = std::min(best, risk::surrogate_value(batch, v, alpha));
        if (phi > best + 1e-12 * std::max(1.0, std::abs(best))) fail("VaR does not minimize the surrogate", i);

        if (risk::cvar_estimate(batch, 0.0) != batch.mean()) fail("cvar at alpha 0 differs from the mean", i);
        const double top_alpha = 1.0 - 1.0 / (double(B) + 1.0);
        if (risk::tail_count(top_alpha, B) == 1 && risk::cvar_estimate(batch, top_alpha) != batch.max()) {
            fail("single-task cvar differs from the max", i);
        }
    }
    return r;
}

SuiteResult quantile_trend_suite(const Options& opt) {
    SuiteResult r{"quantile_trend", 0, {}};
    const std::vector<double> alphas{0.5, 0.7, 0.9};
    const std::vector<std::size_t> sizes{100, 1000, 10000};
    auto rng = stream(opt.seed, {3});
    const auto table = risk::quantile_error_trend(risk::AnalyticDistribution::uniform(0.0, 1.0), alphas, sizes, 100, rng);
    auto row = [&](double a, std::size_t b) {
        for (const auto& t : table) {
            if (t.alpha == a && t.batch_size == b) return t;
        }
        throw std::logic_error("missing quantile row");
    };
    ++r.checks;
    if (!(row(0.7, 10000).mean_abs_error < 0.02)) r.failures.push_back("alpha 0.7, B 10000: mean error not below 0.02");
    for (double a : alphas) {
        ++r.checks;
        if (!(row(a, 10000).mean_abs_error < row(a, 100).mean_abs_error)) {
            r.failures.push_back("alpha " + std::to_string(a) + ": error did not shrink from B 100 to B 10000");
        }
    }
    ++r.checks;
    if (!risk::nonincreasing_within_noise(table)) r.failures.push_back("error increased beyond noise along B");
    return r;
}

SuiteResult gradient_suite(const Options& opt) {
    SuiteResult r{"gradient", 0, {}};
    for (std::uint64_t i = 0; i < 100; ++i) {
        auto rng = stream(opt.seed, {4, i});
        Eigen::Index n = 0;
        const auto f = smooth_case(int(i % 5), rng, n);
        Eigen::VectorXd th(n);
        for (auto& v : th) v = uniform(rng, -1.5, 1.5);
        const ParamVector p(th);
        ++r.checks;
        const double e = rel_err(diff::gradient(f, p).grad.values(), central_differences(f, p));
        if (!(e < 1e-5)) r.failures.push_back(tag("gradient vs central differences", opt.seed, i) + ": rel err " + std::to_string(e));
    }

    const auto spec = models::ModelSpec::sinusoid_mlp();
    const tasks::SineDistConfig dist;
    for (std::uint64_t i = 0; i < 3; ++i) {
        auto rng = stream(opt.seed, {5, i});
        const auto params = models::init_params(spec, rng);
        const auto task = tasks::sample_train_task(rng, dist);
        const auto data = tasks::sample_task_data(task, 5, 5, rng, dist.x_min, dist.x_max);
        const auto inner = models::mlp_task_loss(spec, data.context);
        const auto outer = models::mlp_task_loss(spec, data.target);
        const double lr = 0.01;
        // Central differences of the composite outer(adapt(theta)).
        Eigen::VectorXd fd(params.size());
        for (Eigen::Index j = 0; j < params.size(); ++j) {
            const double h = 1e-6;
            Eigen::VectorXd up = params.values(), dn = params.values();
            up[j] += h;
            dn[j] -= h;
            const ParamVector pu(params.layout(), up), pd(params.layout(), dn);
            fd[j] = (diff::value(outer, diff::adapt(inner, pu, lr)) - diff::value(outer, diff::adapt(inner, pd, lr))) /
                    (2 * h);
        }
        const auto g = diff::meta_gradient(inner, outer, params, lr, diff::GradientMode::exact).grad.values();
        ++r.checks;
        const double e = rel_err(g, fd);
        if (!(e < 1e-4)) r.failures.push_back(tag("meta-gradient vs central differences", opt.seed, i) + ": rel err " + std::to_string(e));
    }
    return r;
}

SuiteResult principle_suite(const Options& opt) {
    SuiteResult r{"principle_equivalence", 0, {}};
    train::TrainConfig base;
    base.meta_batch = 8;
    base.iterations = 1;
    base.seed = opt.seed;
    const train::SineTaskSource source(tasks::SineDistConfig{}, opt.seed, base.shots, base.targets);
    const auto batch = source.batch(1, base.meta_batch);
    const auto init = train::initial_params(base);

    auto step = [&](risk::PrincipleKind kind, double alpha, std::size_t forced_k, std::size_t B) {
        auto cfg = base;
        cfg.principle.kind = kind;
        cfg.principle.alpha = alpha;
        cfg.principle.forced_k = forced_k;
        cfg.meta_batch = B;
        train::Optimizer opt_state(cfg.optimizer, init.size());
        const std::vector<tasks::TaskData> sub(batch.begin(), batch.begin() + std::ptrdiff_t(B));
        return train::maml_meta_step(init, sub, cfg, opt_state).params;
    };

    using K = risk::PrincipleKind;
    r.checks += 3;
    if (!bitwise_equal(step(K::cvar_two_stage, 0.0, 0, 8), step(K::expected_risk, 0.0, 0, 8))) {
        r.failures.push_back(tag("cvar at alpha 0 differs from expected risk", opt.seed, 0));
    }
    if (!bitwise_equal(step(K::cvar_two_stage, 0.7, 1, 8), step(K::worst_in_batch, 0.7, 0, 8))) {
        r.failures.push_back(tag("cvar with k = 1 differs from worst case", opt.seed, 0));
    }
    const auto single = step(K::expected_risk, 0.7, 0, 1);
    for (auto k : {K::worst_in_batch, K::cvar_two_stage, K::group_dro}) {
        if (!bitwise_equal(step(k, 0.7, 0, 1), single)) {
            r.failures.push_back(tag(("principles differ on one task: " + risk::to_string(k)).c_str(), opt.seed, 0));
        }
    }
    return r;
}

std::vector<SuiteResult> run_all(const Options& opt) {
    return {sandwich_suite(opt), var_surrogate_suite(opt), quantile_trend_suite(opt), gradient_suite(opt),
            principle_suite(opt)};
}

}  // namespace drml::selftest

#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>

#include <Eigen/QR>

#include "drml/tasks.hpp"
#include "support.hpp"

using namespace drml;
using namespace drml::tasks;
using Eigen::VectorXd;

constexpr double kPi = std::numbers::pi;

TEST_SUITE("taskgen") {

TEST_CASE("training mixture: degenerate probabilities") {
    SineDistConfig cfg;
    cfg.p_hard = 0.0;
    auto rng = stream(1);
    for (int i = 0; i < 2000; ++i) {
        const auto t = sample_train_task(rng, cfg);
        CHECK(t.amplitude >= 0.1);
        CHECK(t.amplitude <= 1.05);
    }
    cfg.p_hard = 1.0;
    for (int i = 0; i < 2000; ++i) {
        const auto t = sample_train_task(rng, cfg);
        CHECK(t.amplitude >= 4.95);
        CHECK(t.amplitude <= 5.0);
    }
}

TEST_CASE("training mixture: hard fraction and ranges over 1e5 draws") {
    SineDistConfig cfg;
    auto rng = stream(2);
    const int n = 100000;
    int hard = 0, bad = 0;
    for (int i = 0; i < n; ++i) {
        const auto t = sample_train_task(rng, cfg);
        const bool easy = t.amplitude >= 0.1 && t.amplitude <= 1.05;
        const bool h = t.amplitude >= 4.95 && t.amplitude <= 5.0;
        hard += h;
        bad += !(easy || h) || t.phase < 0.0 || t.phase > kPi;
    }
    CHECK(bad == 0);
    // binomial sd is sqrt(0.09 / 1e5) ~ 0.00095, so 0.01 is over ten sigma
    CHECK(std::abs(double(hard) / n - 0.1) < 0.01);
}

TEST_CASE("test grid corners, size and order") {
    const SineDistConfig cfg;
    const auto g = build_test_grid(cfg);
    REQUIRE(g.size() == 490);
    CHECK(g.front().amplitude == 0.1);
    CHECK(g.front().phase == 0.0);
    CHECK(g.back().amplitude == 5.0);
    CHECK(g.back().phase == 2 * kPi);
    std::set<std::pair<double, double>> distinct;
    for (const auto& t : g) distinct.insert({t.amplitude, t.phase});
    CHECK(distinct.size() == 490);

    const auto a = grid_amplitudes(49);
    const auto b = grid_phases(10);
    for (int i = 0; i < 49; ++i) {
        for (int j = 0; j < 10; ++j) {
            CHECK(g[std::size_t(i * 10 + j)].amplitude == a[i]);
            CHECK(g[std::size_t(i * 10 + j)].phase == b[j]);
        }
    }
    CHECK(a[1] - a[0] == doctest::Approx(4.9 / 48).epsilon(1e-12));
    CHECK(b[1] - b[0] == doctest::Approx(2 * kPi / 9).epsilon(1e-12));
}

TEST_CASE("alternative grid shapes must hold 490 tasks") {
    SineDistConfig cfg;
    cfg.grid_amplitudes = 70;
    cfg.grid_phases = 7;
    CHECK(build_test_grid(cfg).size() == 490);
    cfg.grid_phases = 8;
    CHECK_THROWS_AS(build_test_grid(cfg), std::invalid_argument);
    cfg = {};
    cfg.p_hard = 1.5;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("sine values at forced inputs") {
    auto at = [](double a, double b, double x) {
        return sine_points({a, b}, VectorXd::Constant(1, x)).y[0];
    };
    CHECK(at(1, 0, kPi / 2) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(std::abs(at(5, kPi, kPi)) < 1e-15);
    CHECK(at(2, kPi / 2, 0) == doctest::Approx(-2.0).epsilon(1e-15));
}

TEST_CASE("sampled task data: sizes, range, exact values, independence") {
    auto rng = stream(3);
    const SineTask task{2.7, 1.3};
    const auto d = sample_task_data(task, 5, 7, rng);
    REQUIRE(d.context.size() == 5);
    REQUIRE(d.target.size() == 7);
    for (const auto* p : {&d.context, &d.target}) {
        CHECK(p->x.minCoeff() >= -5.0);
        CHECK(p->x.maxCoeff() <= 5.0);
        for (Eigen::Index i = 0; i < p->size(); ++i) CHECK(p->y[i] == 2.7 * std::sin(p->x[i] - 1.3));
    }
    CHECK(d.context.x.head(5) != d.target.x.head(5));
    CHECK_THROWS_AS(sample_task_data(task, 0, 5, rng), std::invalid_argument);
    CHECK_THROWS_AS(sample_task_data(task, 5, 0, rng), std::invalid_argument);
}

TEST_CASE("sampling is a pure function of the stream key") {
    const SineDistConfig cfg;
    auto r1 = stream(5, {3, 4}), r2 = stream(5, {3, 4}), r3 = stream(5, {3, 5});
    const auto t1 = sample_train_task(r1, cfg), t2 = sample_train_task(r2, cfg), t3 = sample_train_task(r3, cfg);
    CHECK(t1.amplitude == t2.amplitude);
    CHECK(t1.phase == t2.phase);
    CHECK(t1.phase != t3.phase);
    const auto d1 = sample_task_data(t1, 5, 5, r1), d2 = sample_task_data(t2, 5, 5, r2);
    CHECK((d1.context.x.array() == d2.context.x.array()).all());
    CHECK((d1.target.y.array() == d2.target.y.array()).all());
}

TEST_CASE("task CSV export") {
    TempDir dir("taskcsv");
    const auto g = build_test_grid({});
    write_task_csv(dir.path / "grid.csv", g);
    std::istringstream in(slurp(dir.path / "grid.csv"));
    std::string line;
    std::getline(in, line);
    CHECK(line == "task_index,a,b");
    std::size_t n = 0;
    while (std::getline(in, line)) {
        std::size_t i;
        double a, b;
        REQUIRE(std::sscanf(line.c_str(), "%zu,%lf,%lf", &i, &a, &b) == 3);
        CHECK(i == n);
        CHECK(a == g[n].amplitude);
        CHECK(b == g[n].phase);
        ++n;
    }
    CHECK(n == 490);
}

TEST_CASE("RBF kernel entries") {
    const VectorXd x = (VectorXd(3) << 0.0, 0.4, 1.0).finished();
    const auto K = rbf_kernel(x, 0.4, 2.0);
    CHECK(K(0, 0) == 2.0);
    CHECK(K(0, 1) == doctest::Approx(2.0 * std::exp(-0.5)).epsilon(1e-15));
    CHECK(K(2, 0) == doctest::Approx(2.0 * std::exp(-1.0 / 0.32)).epsilon(1e-15));
    CHECK(K.isApprox(K.transpose(), 0.0));
}

TEST_CASE("GP task structure with default settings") {
    const GPConfig cfg;
    auto rng = stream(7);
    for (int trial = 0; trial < 20; ++trial) {
        const auto [curve, data] = sample_gp_task(rng, cfg);
        REQUIRE(curve.x.size() == 400);
        CHECK(curve.x[0] == -2.0);
        CHECK(curve.x[399] == 2.0);
        CHECK(curve.length_scale == 0.4);
        const auto n = data.context.size();
        CHECK(n >= 3);
        CHECK(n <= 50);
        CHECK((data.target.x.array() == curve.x.array()).all());
        CHECK((data.target.y.array() == curve.y.array()).all());
        std::set<double> seen;
        for (Eigen::Index i = 0; i < n; ++i) {
            seen.insert(data.context.x[i]);
            const auto j = Eigen::Index(std::lround((data.context.x[i] + 2.0) / 4.0 * 399));
            CHECK(data.context.y[i] == curve.y[j]);
        }
        CHECK(seen.size() == std::size_t(n));  // drawn without replacement
    }
}

TEST_CASE("GP sample covariance approaches the kernel") {
    GPConfig cfg;
    cfg.grid_size = 5;
    cfg.min_context = 1;
    cfg.max_context = 5;
    const VectorXd x = VectorXd::LinSpaced(5, -2, 2);
    const auto K = rbf_kernel(x, cfg.length_scale, cfg.signal_variance);
    auto rng = stream(8);
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(5, 5);
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const auto y = sample_gp_task(rng, cfg).first.y;
        S += y * y.transpose();
    }
    S /= n;
    // entrywise sd of the sample second moment is at most sqrt(2 / n) ~ 0.01
    CHECK((S - K).cwiseAbs().maxCoeff() < 0.05);
}

TEST_CASE("GP degenerate kernels") {
    GPConfig cfg;
    cfg.length_scale = 1e3;
    auto rng = stream(9);
    for (int t = 0; t < 5; ++t) {
        const auto y = sample_gp_task(rng, cfg).first.y;
        // A long length scale leaves a random offset plus a slope with sd
        // 1/length_scale, so over |x| <= 2 the curve spreads by a few 1e-3;
        // the jitter adds independent noise with sd 1e-3.
        CHECK((y.array() - y.mean()).abs().maxCoeff() < 1e-2);
    }
    cfg.jitter = 1e-10;
    for (int t = 0; t < 5; ++t) {
        const auto [curve, data] = sample_gp_task(rng, cfg);
        Eigen::MatrixXd A(curve.x.size(), 2);
        A << Eigen::VectorXd::Ones(curve.x.size()), curve.x;
        const VectorXd coef = A.colPivHouseholderQr().solve(curve.y);
        CHECK((curve.y - A * coef).cwiseAbs().maxCoeff() < 1e-3);
    }

    cfg = {};
    cfg.signal_variance = 0.0;
    for (int t = 0; t < 5; ++t) CHECK(sample_gp_task(rng, cfg).first.y.cwiseAbs().maxCoeff() <= 1e-2);
}

TEST_CASE("GP determinism and cached factor") {
    const GPConfig cfg;
    auto r1 = stream(10), r2 = stream(10);
    const auto a = sample_gp_task(r1, cfg);
    const auto chol = jittered_cholesky(rbf_kernel(a.first.x, cfg.length_scale, cfg.signal_variance), cfg.jitter);
    const auto b = sample_gp_task(r2, cfg, chol);
    CHECK((a.first.y.array() == b.first.y.array()).all());
    CHECK((a.second.context.x.array() == b.second.context.x.array()).all());
    CHECK_THROWS_AS(sample_gp_task(r2, cfg, Eigen::MatrixXd::Identity(3, 3)), std::invalid_argument);
}

TEST_CASE("jitter escalation and failure") {
    // smallest eigenvalue -1e-8: the first jitter fails, an escalated one succeeds
    Eigen::MatrixXd K = Eigen::MatrixXd::Identity(2, 2);
    K(0, 1) = K(1, 0) = 1.0 + 1e-8;
    CHECK_NOTHROW(jittered_cholesky(K, 1e-9));
    K(0, 1) = K(1, 0) = 2.0;
    CHECK_THROWS_AS(jittered_cholesky(K, 1e-6), std::runtime_error);
    GPConfig bad;
    bad.max_context = 500;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

}  // TEST_SUITE

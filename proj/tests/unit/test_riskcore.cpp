#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "drml/risk.hpp"
#include "support.hpp"

using namespace drml;
using namespace drml::risk;

namespace {

RiskBatch batch(std::vector<double> l) { return RiskBatch::from_losses(l); }

// Brute-force oracles, independent of the library's selection code.
std::vector<std::size_t> top_k_oracle(const std::vector<double>& l, std::size_t k) {
    std::vector<std::size_t> idx(l.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return l[a] > l[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

double var_oracle(std::vector<double> l, double alpha) {
    std::sort(l.begin(), l.end());
    // smallest loss whose empirical CDF reaches alpha
    for (double x : l) {
        const double F = double(std::count_if(l.begin(), l.end(), [&](double y) { return y <= x; })) / double(l.size());
        if (F >= alpha - 1e-12) return x;
    }
    return l.back();
}

std::vector<double> random_losses(std::mt19937_64& g, std::size_t n, bool ties) {
    std::vector<double> l(n);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    std::uniform_int_distribution<int> d(0, 5);
    for (auto& x : l) x = ties ? double(d(g)) : u(g);
    return l;
}

}  // namespace

TEST_SUITE("riskcore") {

TEST_CASE("batch validation") {
    CHECK_THROWS_AS(RiskBatch({{0, 1.0}, {0, 2.0}}), std::invalid_argument);
    CHECK_THROWS_AS(batch({1.0, std::nan("")}), std::invalid_argument);
    CHECK_THROWS_AS(batch({1.0, INFINITY}), std::invalid_argument);
    CHECK_THROWS_AS(estimate_var(RiskBatch{}, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(screen_tail(RiskBatch{}, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(estimate_var(batch({1}), 1.0), std::invalid_argument);
    CHECK_THROWS_AS(estimate_var(batch({1}), -0.1), std::invalid_argument);
    const auto b = batch({1, 5, 2});
    CHECK(b.mean() == doctest::Approx(8.0 / 3));
    CHECK(b.max() == 5);
}

TEST_CASE("estimate_var examples") {
    CHECK(estimate_var(batch({1, 2, 3, 4}), 0.5).xi_hat == 2);
    CHECK(estimate_var(batch({7}), 0.3).xi_hat == 7);
    CHECK(estimate_var(batch({7}), 0.99).xi_hat == 7);
    CHECK(estimate_var(batch({1, 2, 3, 4}), 0.0).xi_hat == 1);
    const auto v = estimate_var(batch({4, 3, 2, 1}), 0.75);
    CHECK(v.xi_hat == 3);
    CHECK(v.alpha == 0.75);
    CHECK(v.batch_size == 4);
}

TEST_CASE("tail and rank counts at representation edges") {
    CHECK(tail_count(0.9, 10) == 1);
    CHECK(tail_count(0.7, 10) == 3);
    CHECK(tail_count(0.7, 25) == 7);
    CHECK(tail_count(0.7, 490) == 147);
    CHECK(tail_count(0.5, 64) == 32);
    CHECK(tail_count(0.99, 5) == 1);
    CHECK(tail_count(0.0, 9) == 9);
    CHECK(var_rank(0.7, 10) == 7);
    CHECK(var_rank(0.0, 10) == 1);
    CHECK(var_rank(0.3, 10) == 3);
}

TEST_CASE("screen_tail examples") {
    auto s = screen_tail(batch({1, 2, 3, 4}), 0.5);
    CHECK(s.k == 2);
    CHECK(s.indices == std::vector<std::size_t>{2, 3});
    s = screen_tail(batch({1, 2, 3, 4}), 0.0);
    CHECK(s.k == 4);
    CHECK(s.indices == std::vector<std::size_t>{0, 1, 2, 3});
    s = screen_tail(batch({5, 5, 5}), 0.9);
    CHECK(s.k == 1);
    CHECK(s.indices == std::vector<std::size_t>{0});
    // tie-break follows task index, not position
    s = screen_tail(RiskBatch({{9, 5.0}, {4, 5.0}, {7, 1.0}}), 0.9);
    CHECK(s.indices == std::vector<std::size_t>{4});
}

TEST_CASE("screen_tail and estimate_var agree with brute-force oracles") {
    std::mt19937_64 g(123);
    std::uniform_real_distribution<double> ua(0.0, 0.999);
    std::uniform_int_distribution<std::size_t> ub(1, 1000);
    for (int trial = 0; trial < 300; ++trial) {
        const auto l = random_losses(g, ub(g), trial % 2 == 0);
        const double alpha = ua(g);
        const auto b = batch(l);
        const auto s = screen_tail(b, alpha);
        const std::size_t k = std::max<std::size_t>(1, std::size_t(std::floor((1 - alpha) * double(l.size()) + 1e-9)));
        REQUIRE(s.k == k);
        CHECK(s.indices == top_k_oracle(l, k));
        CHECK(estimate_var(b, alpha).xi_hat == var_oracle(l, alpha));
        double tail = 0;
        for (auto i : s.indices) tail += l[i];
        CHECK(cvar_estimate(b, alpha) == doctest::Approx(tail / double(k)).epsilon(1e-14));
    }
}

TEST_CASE("cvar_estimate examples and special cases") {
    CHECK(cvar_estimate(batch({1, 2, 3, 4}), 0.5) == 3.5);
    CHECK(cvar_estimate(batch({1, 2, 3, 4}), 0.0) == 2.5);
    CHECK(cvar_estimate(batch({7}), 0.9) == 7);
    std::mt19937_64 g(5);
    for (int trial = 0; trial < 100; ++trial) {
        const auto l = random_losses(g, 1 + trial * 7, false);
        const auto b = batch(l);
        double s = 0;
        for (double x : l) s += x;  // summed in index order, as the batch mean is
        CHECK(cvar_estimate(b, 0.0) == doctest::Approx(s / double(l.size())).epsilon(1e-14));
        CHECK(cvar_estimate(b, 0.0) == b.mean());
        CHECK(screen_top_k(b, 1, 0.5).indices.size() == 1);
        CHECK(l[screen_top_k(b, 1, 0.5).indices[0]] == b.max());
        // alpha close enough to 1 that k = 1
        CHECK(cvar_estimate(b, 1.0 - 0.5 / double(l.size())) == b.max());
    }
}

TEST_CASE("surrogate examples") {
    const auto b = batch({1, 2, 3, 4});
    CHECK(surrogate_value(b, 2, 0.5) == 3.5);
    CHECK(surrogate_value(b, 10, 0.5) == 10);
    CHECK(surrogate_value(b, 0, 0.0) == 2.5);
}

TEST_CASE("surrogate at the order-statistic VaR against the truncated tail mean") {
    // phi at the order-statistic VaR is the exact CVaR of the empirical
    // distribution, boundary atom included fractionally. The screened mean
    // drops that fraction, so it matches phi when (1 - alpha) B is an integer
    // and otherwise can only be larger.
    CHECK(surrogate_value(batch({1, 2, 3}), estimate_var(batch({1, 2, 3}), 0.5).xi_hat, 0.5) ==
          doctest::Approx(8.0 / 3));
    CHECK(cvar_estimate(batch({1, 2, 3}), 0.5) == 3);

    std::mt19937_64 g(8);
    std::uniform_real_distribution<double> ua(0.0, 0.99);
    int aligned = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t B = 1 + trial % 60;
        const auto l = random_losses(g, B, trial % 3 == 0);
        // every fourth trial uses a level where (1 - alpha) B is an integer
        const double alpha = trial % 4 == 0 ? double(trial % int(B)) / double(B) : ua(g);
        const auto b = batch(l);
        const double phi = surrogate_value(b, estimate_var(b, alpha).xi_hat, alpha);
        const double cv = cvar_estimate(b, alpha);
        const DiscreteDistribution emp{l, std::vector<double>(B, 1.0 / double(B))};
        CHECK(phi == doctest::Approx(exact_cvar(emp, alpha)).epsilon(1e-12));
        CHECK(phi <= cv + 1e-12 * std::max(1.0, cv));
        const double t = (1 - alpha) * double(B);
        if (std::abs(t - std::round(t)) < 1e-9 && t >= 1) {
            CHECK(phi >= cv - 1e-12);
            CHECK(phi == doctest::Approx(cv).epsilon(1e-12));
            ++aligned;
        }
    }
    CHECK(aligned > 100);
}

TEST_CASE("surrogate minimum sits at the order-statistic VaR") {
    std::mt19937_64 g(9);
    std::uniform_real_distribution<double> ua(0.05, 0.95);
    for (int trial = 0; trial < 100; ++trial) {
        auto l = random_losses(g, 5 + trial % 40, false);
        const double alpha = ua(g);
        const auto b = batch(l);
        std::sort(l.begin(), l.end());
        double best = INFINITY, arg = 0;
        for (int i = 0; i <= 20000; ++i) {
            const double xi = l.front() - 0.5 + (l.back() - l.front() + 1.0) * i / 20000.0;
            const double v = surrogate_value(b, xi, alpha);
            if (v < best) best = v, arg = xi;
        }
        const double xi_hat = estimate_var(b, alpha).xi_hat;
        // one inter-atom gap on either side of xi_hat
        const auto it = std::lower_bound(l.begin(), l.end(), xi_hat);
        const double lo = it == l.begin() ? xi_hat : *(it - 1);
        const double hi = it + 1 == l.end() ? xi_hat : *(it + 1);
        CHECK(arg >= lo - 1e-3);
        CHECK(arg <= hi + 1e-3);
        CHECK(surrogate_value(b, xi_hat, alpha) <= best + 1e-9);
    }
}

TEST_CASE("minimised surrogate is midpoint-convex for quadratic task losses") {
    std::mt19937_64 g(10);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> c(8);
        for (auto& x : c) x = u(g);
        const double alpha = 0.1 * (trial % 10);
        auto f = [&](double th) {
            std::vector<double> l;
            for (double ci : c) l.push_back((th - ci) * (th - ci));
            const auto b = batch(l);
            double m = INFINITY;
            for (int i = 0; i <= 400; ++i) m = std::min(m, surrogate_value(b, 40.0 * i / 400.0, alpha));
            // the grid contains every atom up to rounding only by chance, so
            // also try the atoms themselves (the exact minimisers)
            for (double x : l) m = std::min(m, surrogate_value(b, x, alpha));
            return m;
        };
        const double a = u(g), bb = u(g);
        CHECK(f(0.5 * (a + bb)) <= 0.5 * (f(a) + f(bb)) + 1e-9);
    }
}

TEST_CASE("kappa examples") {
    CHECK(kappa(0.5) == 3);
    CHECK(kappa(0.0) == 2);
    CHECK(kappa(0.7) == doctest::Approx(13.0 / 3).epsilon(1e-15));
    CHECK(kappa(0.9) == doctest::Approx(11.0).epsilon(1e-14));
}

TEST_CASE("exact VaR and CVaR on discrete populations") {
    const DiscreteDistribution d{{1, 2, 3, 4}, {0.25, 0.25, 0.25, 0.25}};
    CHECK(exact_var(d, 0.5) == 2);
    CHECK(exact_cvar(d, 0.5) == doctest::Approx(3.5));
    CHECK(exact_cvar(d, 0.6) == doctest::Approx((0.15 * 3 + 0.25 * 4) / 0.4));
    CHECK(exact_cvar(d, 0.0) == doctest::Approx(2.5));
    CHECK_THROWS_AS(DiscreteDistribution({{1, 2}, {0.5, 0.4}}).validate(), std::invalid_argument);
    CHECK_THROWS_AS(DiscreteDistribution({{1, 2}, {1.5, -0.5}}).validate(), std::invalid_argument);
    CHECK_THROWS_AS(sandwich_check(DiscreteDistribution{{1, 2}, {0.5, 0.5 + 1e-10}}, 1.0, 0.5), std::invalid_argument);
}

TEST_CASE("sandwich examples") {
    const DiscreteDistribution d{{1, 2, 3, 4}, {0.25, 0.25, 0.25, 0.25}};
    auto r = sandwich_check(d, 2.4, 0.5);
    CHECK(r.phi == doctest::Approx(3.5).epsilon(1e-15));
    CHECK(r.exact_cvar == doctest::Approx(3.5).epsilon(1e-15));
    CHECK(r.delta == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(r.kappa == 3);
    CHECK(r.holds);
    r = sandwich_check(d, 2.0, 0.5);
    CHECK(r.delta == 0);
    CHECK(r.phi == doctest::Approx(r.exact_cvar).epsilon(1e-15));
    CHECK(r.holds);
}

TEST_CASE("sandwich holds on random populations and tightens only with the full constant") {
    std::mt19937_64 g(2024);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int inst = 0; inst < 100; ++inst) {
        const std::size_t n = 1 + inst % 12;
        DiscreteDistribution d;
        double tot = 0;
        for (std::size_t i = 0; i < n; ++i) {
            d.atoms.push_back(10 * u(g));
            d.probs.push_back(0.05 + u(g));
            tot += d.probs.back();
        }
        for (auto& p : d.probs) p /= tot;
        d.probs.back() = 1.0 - std::accumulate(d.probs.begin(), d.probs.end() - 1, 0.0);
        const double alpha = 0.95 * u(g);
        const double xi_hat = exact_var(d, alpha) + (u(g) - 0.5) * 4;
        const auto r = sandwich_check(d, xi_hat, alpha);
        CAPTURE(inst);
        CHECK(r.holds);
        // independent recomputation of phi by enumeration
        double hinge = 0;
        for (std::size_t i = 0; i < n; ++i) hinge += d.probs[i] * std::max(d.atoms[i] - xi_hat, 0.0);
        CHECK(r.phi == doctest::Approx(xi_hat + hinge / (1 - alpha)).epsilon(1e-12));
        CHECK(r.exact_cvar <= r.phi + 1e-12 * std::max(1.0, std::abs(r.phi)));
    }
    // point mass at 1, alpha 0, xi_hat 2: phi = 2, CVaR = 1, delta = 1, so the
    // lower bound 2 - kappa < 1 needs kappa > 1; a constant one too small fails
    const DiscreteDistribution point{{1.0}, {1.0}};
    CHECK(sandwich_check(point, 2.0, 0.0).holds);
    CHECK_FALSE(sandwich_check(point, 2.0, 0.0, kappa(0.0) - 1.0).holds);
}

TEST_CASE("group DRO weights") {
    auto w = group_dro_weights(batch({0, 0}), 1.0);
    CHECK(w[0] == 0.5);
    CHECK(w[1] == 0.5);
    w = group_dro_weights(batch({std::log(2.0), 0}), 1.0);
    CHECK(w[0] == doctest::Approx(2.0 / 3).epsilon(1e-15));
    CHECK(w[1] == doctest::Approx(1.0 / 3).epsilon(1e-15));
    for (double tau : {0.1, 1.0, 7.0}) {
        w = group_dro_weights(batch({1, 1, 1}), tau);
        for (double x : w) CHECK(x == doctest::Approx(1.0 / 3).epsilon(1e-15));
    }
    CHECK_THROWS_AS(group_dro_weights(batch({1}), 0.0), std::invalid_argument);
    CHECK_THROWS_AS(group_dro_weights(batch({1}), -1.0), std::invalid_argument);

    std::mt19937_64 g(4);
    for (int trial = 0; trial < 100; ++trial) {
        const auto l = random_losses(g, 1 + trial % 30, false);
        const double tau = 0.05 + 0.1 * (trial % 20);
        const auto a = group_dro_weights(batch(l), tau);
        auto shifted = l;
        for (auto& x : shifted) x += 1000.0;
        const auto b = group_dro_weights(batch(shifted), tau);
        CHECK(std::accumulate(a.begin(), a.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
        for (std::size_t i = 0; i < l.size(); ++i) {
            CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
            for (std::size_t j = 0; j < l.size(); ++j) {
                if (l[i] <= l[j]) CHECK(a[i] <= a[j]);
            }
        }
    }
    // large losses stay finite thanks to max subtraction
    w = group_dro_weights(batch({1e4, 1e4 - 1}), 1.0);
    CHECK(w[0] == doctest::Approx(std::exp(1.0) / (1 + std::exp(1.0))));
}

TEST_CASE("empirical CDF") {
    const EmpiricalCdf F(batch({1, 2, 3, 4}));
    CHECK(F(2.5) == 0.5);
    CHECK(F(0) == 0);
    CHECK(F(4) == 1);
    CHECK(F(2) == 0.5);  // right-continuous
    CHECK(F(std::nextafter(2.0, 0.0)) == 0.25);
    CHECK(F(100) == 1);
    CHECK_THROWS(EmpiricalCdf(std::vector<double>{}));
}

TEST_CASE("principle weights") {
    const auto b = RiskBatch({{0, 1.0}, {1, 4.0}, {2, 3.0}, {3, 2.0}});
    PrincipleConfig c;
    c.kind = PrincipleKind::expected_risk;
    auto w = principle_weights(b, c);
    REQUIRE(w.size() == 4);
    for (auto& x : w) CHECK(x.weight == 0.25);

    c.kind = PrincipleKind::worst_in_batch;
    w = principle_weights(b, c);
    REQUIRE(w.size() == 1);
    CHECK(w[0].task_index == 1);
    CHECK(w[0].weight == 1.0);

    c.kind = PrincipleKind::cvar_two_stage;
    c.alpha = 0.5;
    w = principle_weights(b, c);
    REQUIRE(w.size() == 2);
    CHECK(w[0].task_index == 1);
    CHECK(w[1].task_index == 2);
    CHECK(w[0].weight == 0.5);
    c.forced_k = 1;
    w = principle_weights(b, c);
    REQUIRE(w.size() == 1);
    CHECK(w[0].task_index == 1);

    c = {};
    c.kind = PrincipleKind::group_dro;
    c.temperature = 2.0;
    w = principle_weights(b, c);
    const auto ref = group_dro_weights(b, 2.0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(w[i].weight == ref[i]);

    c = {};
    c.alpha = 1.0;
    CHECK_THROWS(c.validate());
    c.alpha = 0.5;
    c.temperature = 0.0;
    CHECK_THROWS(c.validate());
    CHECK(parse_principle("group_dro") == PrincipleKind::group_dro);
    CHECK(to_string(PrincipleKind::cvar_two_stage) == "cvar_two_stage");
    CHECK_THROWS(parse_principle("tr_maml"));
}

TEST_CASE("quantile error trend") {
    auto rng = stream(77);
    const auto uni = AnalyticDistribution::uniform(0, 1);
    const double a7[] = {0.7};
    const std::size_t big[] = {10000};
    const auto t = quantile_error_trend(uni, a7, big, 100, rng);
    REQUIRE(t.size() == 1);
    CHECK(t[0].mean_abs_error < 0.02);

    // B = 1 is the single sample; E|U - 0.7| = (0.49 + 0.09) / 2 = 0.29
    const std::size_t one[] = {1};
    const auto t1 = quantile_error_trend(uni, a7, one, 20000, rng);
    CHECK(t1[0].mean_abs_error == doctest::Approx(0.29).epsilon(0.03));

    const double alphas[] = {0.5, 0.7, 0.9};
    const std::size_t sizes[] = {100, 1000, 10000};
    for (const auto& dist : {uni, AnalyticDistribution::exponential(1.0)}) {
        const auto tab = quantile_error_trend(dist, alphas, sizes, 100, rng);
        REQUIRE(tab.size() == 9);
        for (std::size_t a = 0; a < 3; ++a) {
            const auto& small = *std::find_if(tab.begin(), tab.end(),
                                              [&](auto& r) { return r.alpha == alphas[a] && r.batch_size == 100; });
            const auto& large = *std::find_if(tab.begin(), tab.end(),
                                              [&](auto& r) { return r.alpha == alphas[a] && r.batch_size == 10000; });
            CHECK(large.mean_abs_error < small.mean_abs_error);
        }
        CHECK(nonincreasing_within_noise(tab));
    }
    CHECK(AnalyticDistribution::exponential(2.0).quantile(0.5) == doctest::Approx(std::log(2.0) / 2));
}

TEST_CASE("report CSVs") {
    TempDir dir("riskcsv");
    std::vector<QuantileErrorRow> q{{0.7, 100, 10, 0.03, 0.002}};
    write_quantile_csv(dir.path / "q.csv", q);
    CHECK(slurp(dir.path / "q.csv").rfind("alpha,batch_size,trials,mean_abs_error,std_error\n", 0) == 0);
    std::vector<SandwichRow> s{{0, 0.5, 2.4, sandwich_check({{1, 2, 3, 4}, {0.25, 0.25, 0.25, 0.25}}, 2.4, 0.5)}};
    write_sandwich_csv(dir.path / "s.csv", s);
    CHECK(slurp(dir.path / "s.csv").find("\n0,0.5,2.") != std::string::npos);
}

}  // TEST_SUITE

#pragma once

// Built-in consistency suites run by `drml selftest`. Each check is its own
// oracle; failures carry the seed path needed to reproduce them.

#include <cstdint>
#include <string>
#include <vector>

namespace drml::selftest {

struct SuiteResult {
    std::string name;
    std::size_t checks = 0;
    std::vector<std::string> failures;

    bool passed() const { return failures.empty(); }
};

struct Options {
    std::uint64_t seed = 20240607;
    /// Added to the sandwich constant; nonzero values are for mutation checks.
    double kappa_offset = 0.0;
};

/// Sandwich bound on random discrete populations plus a fixed instance where
/// the bound is tight.
SuiteResult sandwich_suite(const Options& opt);

/// Order-statistic VaR against the surrogate minimum; CVaR special cases.
SuiteResult var_surrogate_suite(const Options& opt);

/// Quantile-estimation error shrinks with batch size.
SuiteResult quantile_trend_suite(const Options& opt);

/// Reverse-mode gradients and exact meta-gradients against central differences.
SuiteResult gradient_suite(const Options& opt);

/// Principle reductions: cvar at alpha 0 is expected risk, k = 1 is worst case.
SuiteResult principle_suite(const Options& opt);

std::vector<SuiteResult> run_all(const Options& opt);

}  // namespace drml::selftest

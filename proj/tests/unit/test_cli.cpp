#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "drml/config.hpp"
#include "drml/models.hpp"
#include "support.hpp"

using namespace drml;
using namespace drml::config;
namespace fs = std::filesystem;

namespace {

const char* kSmoke = R"({
  "name": "smoke",
  "seeds": [3],
  "task": {"family": "sinusoid"},
  "model": {"kind": "mlp"},
  "principle": {"kind": "cvar_two_stage", "alpha": 0.7},
  "train": {"iterations": 1, "meta_batch": 4}
})";

std::string with_iterations(int n) {
    std::string s = kSmoke;
    s.replace(s.find("\"iterations\": 1"), 15, "\"iterations\": " + std::to_string(n));
    return s;
}

void write(const fs::path& p, const std::string& text) {
    std::ofstream(p, std::ios::trunc) << text;
}

int cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string("\"") + DRML_CLI_PATH + "\" " + args + " >\"" + log.string() + "\" 2>&1";
    const int st = std::system(cmd.c_str());
    return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::size_t lines(const std::string& s) { return std::size_t(std::count(s.begin(), s.end(), '\n')); }

std::string field_of(const std::string& text) {
    try {
        parse_config(text);
    } catch (const ConfigError& e) {
        return e.field();
    }
    return "";
}

std::string drop(std::string text, const std::string& needle) {
    const auto at = text.find(needle);
    REQUIRE(at != std::string::npos);
    text.erase(at, needle.size());
    return text;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("config parsing fills defaults") {
    const auto c = parse_config(kSmoke);
    CHECK(c.name == "smoke");
    CHECK(c.seeds == std::vector<std::uint64_t>{3});
    CHECK(c.family == TaskFamily::sinusoid);
    CHECK(c.train.model == models::ModelSpec::sinusoid_mlp());
    CHECK(c.train.principle.kind == risk::PrincipleKind::cvar_two_stage);
    CHECK(c.train.principle.alpha == 0.7);
    CHECK(c.train.iterations == 1);
    CHECK(c.train.meta_batch == 4);
    CHECK(c.train.shots == 5);
    CHECK(c.train.inner_lr == 0.01);
    CHECK(c.train.optimizer.lr == 0.001);
    CHECK(c.eval.alphas == std::vector<double>{0.7});
}

TEST_CASE("missing required fields and unknown keys name the field") {
    CHECK(field_of(drop(kSmoke, R"("seeds": [3],)")) == "seeds");
    CHECK(field_of(drop(kSmoke, R"("family": "sinusoid")")) == "task.family");
    CHECK(field_of(drop(kSmoke, R"("kind": "mlp")")) == "model.kind");
    CHECK(field_of(drop(kSmoke, R"("kind": "cvar_two_stage", )")) == "principle.kind");
    CHECK(field_of(drop(kSmoke, R"("iterations": 1, )")) == "train.iterations");

    std::string extra = kSmoke;
    extra.insert(extra.find("\"meta_batch\""), "\"metabatch\": 3, ");
    CHECK(field_of(extra) == "train.metabatch");
    CHECK(field_of("{not json") == "<root>");

    std::string bad = kSmoke;
    bad.replace(bad.find("0.7"), 3, "1.5");
    CHECK(field_of(bad) == "principle");
    bad = kSmoke;
    bad.replace(bad.find("\"mlp\""), 5, "\"cnp\"");
    CHECK(field_of(bad) == "model.kind");
    CHECK_FALSE(field_of(R"({"seeds": [], "task": {"family": "sinusoid"}, "model": {"kind": "mlp"},
                            "principle": {"kind": "expected_risk"}, "train": {"iterations": 1}})")
                    .empty());
}

TEST_CASE("canonical JSON round-trips") {
    auto c = parse_config(kSmoke);
    c.train.principle.temperature = 0.3;
    c.eval.alphas = {0.0, 0.7, 0.9};
    c.sinusoid.p_hard = 1.0 / 3.0;
    const auto text = to_json(c);
    const auto back = parse_config(text);
    CHECK(to_json(back) == text);
    CHECK(back.sinusoid.p_hard == c.sinusoid.p_hard);
    CHECK(back.train.principle.temperature == 0.3);

    const auto gp = parse_config(R"({"seeds": [1, 2], "task": {"family": "gp", "gp": {"grid_size": 50}},
        "model": {"kind": "cnp", "encoder": [2, 8, 8], "decoder": [9, 8, 2]},
        "principle": {"kind": "cvar_two_stage", "alpha": 0.5}, "train": {"iterations": 3}})");
    CHECK(gp.train.model.encoder == std::vector<int>{2, 8, 8});
    CHECK(to_json(parse_config(to_json(gp))) == to_json(gp));
}

TEST_CASE("train: run directory, trace rows, byte-identical reruns") {
    TempDir d("cli_train");
    write(d.path / "smoke.json", kSmoke);
    REQUIRE(cli("train --config " + (d.path / "smoke.json").string() + " --out " + (d.path / "a").string(),
                d.path / "a.log") == 0);
    CHECK(fs::exists(d.path / "a" / "config.json"));
    CHECK(fs::exists(d.path / "a" / "run_info.json"));
    CHECK(fs::exists(d.path / "a" / "metrics_0.json"));
    CHECK(fs::exists(d.path / "a" / "checkpoint_000001.bin"));
    const auto trace = slurp(d.path / "a" / "trace.csv");
    CHECK(lines(trace) == 2);  // header and one iteration
    CHECK(parse_config(slurp(d.path / "a" / "config.json")).seeds == std::vector<std::uint64_t>{3});

    REQUIRE(cli("train --config " + (d.path / "smoke.json").string() + " --out " + (d.path / "b").string(),
                d.path / "b.log") == 0);
    CHECK(slurp(d.path / "b" / "trace.csv") == trace);
    CHECK(slurp(d.path / "b" / "checkpoint_000001.bin") == slurp(d.path / "a" / "checkpoint_000001.bin"));

    // multiple seeds go to seed_<n> subdirectories
    REQUIRE(cli("train --config " + (d.path / "smoke.json").string() + " --seeds 1,2 --out " + (d.path / "m").string(),
                d.path / "m.log") == 0);
    CHECK(fs::exists(d.path / "m" / "seed_1" / "trace.csv"));
    CHECK(fs::exists(d.path / "m" / "seed_2" / "trace.csv"));
    CHECK(slurp(d.path / "m" / "seed_1" / "trace.csv") != slurp(d.path / "m" / "seed_2" / "trace.csv"));
}

TEST_CASE("train: configuration errors exit with the usage code") {
    TempDir d("cli_bad");
    write(d.path / "bad.json", drop(kSmoke, R"("iterations": 1, )"));
    CHECK(cli("train --config " + (d.path / "bad.json").string() + " --out " + (d.path / "r").string(),
              d.path / "log") == 2);
    CHECK(slurp(d.path / "log").find("train.iterations") != std::string::npos);
    CHECK_FALSE(fs::exists(d.path / "r" / "trace.csv"));
    CHECK(cli("train --config " + (d.path / "absent.json").string(), d.path / "log") == 2);
    CHECK(cli("train", d.path / "log") == 2);
    CHECK(cli("frobnicate", d.path / "log") == 2);
}

TEST_CASE("eval: per-alpha reports and missing checkpoints") {
    TempDir d("cli_eval");
    write(d.path / "c.json", with_iterations(3));
    REQUIRE(cli("train --config " + (d.path / "c.json").string() + " --out " + (d.path / "run").string(),
                d.path / "t.log") == 0);
    const auto ck = d.path / "run" / "checkpoint_000003.bin";
    REQUIRE(fs::exists(ck));
    REQUIRE(cli("eval --checkpoint " + ck.string() + " --alphas 0,0.7 --out " + (d.path / "ev").string(),
                d.path / "e.log") == 0);
    const auto r0 = eval::read_metrics_json(d.path / "ev" / "eval_alpha_0.json");
    const auto r1 = eval::read_metrics_json(d.path / "ev" / "eval_alpha_1.json");
    CHECK(r0.n_tasks == 490);
    CHECK(r0.alpha_eval == 0.0);
    CHECK(r0.cvar == r0.average);
    CHECK(r1.per_task_losses == r0.per_task_losses);
    CHECK(r1.cvar >= r1.average);

    // the stored config reproduces the in-process evaluation
    const auto c = load_config(d.path / "run" / "config.json");
    const auto ref = evaluate_checkpoint(c, models::read_checkpoint(ck), {0.7});
    CHECK(ref[0].per_task_losses == r1.per_task_losses);
    CHECK(ref[0].cvar == r1.cvar);

    CHECK(cli("eval --checkpoint " + (d.path / "nope.bin").string(), d.path / "e.log") == 2);
    CHECK(cli("eval --checkpoint " + ck.string() + " --alphas 1.0", d.path / "e.log") == 2);
}

TEST_CASE("landscape over a custom resolution") {
    TempDir d("cli_land");
    write(d.path / "c.json", kSmoke);
    REQUIRE(cli("train --config " + (d.path / "c.json").string() + " --out " + (d.path / "run").string(),
                d.path / "t.log") == 0);
    const auto ck = d.path / "run" / "checkpoint_000001.bin";
    REQUIRE(cli("landscape --checkpoint " + ck.string() + " --resolution 7x3 --out " + (d.path / "l.csv").string(),
                d.path / "l.log") == 0);
    const auto g = eval::read_landscape_csv(d.path / "l.csv");
    CHECK(g.mse.rows() == 7);
    CHECK(g.mse.cols() == 3);
    CHECK(cli("landscape --checkpoint " + ck.string() + " --resolution 7by3", d.path / "l.log") == 2);
}

TEST_CASE("sweep: one row per value and seed; a single run matches eval") {
    TempDir d("cli_sweep");
    write(d.path / "c.json", with_iterations(2));
    REQUIRE(cli("sweep --config " + (d.path / "c.json").string() + " --axis alpha --values 0,0.5 --seeds 1,2 --out " +
                    (d.path / "s").string(),
                d.path / "s.log") == 0);
    const auto rows = eval::read_comparison_csv(d.path / "s" / "comparison.csv");
    CHECK(rows.size() == 4);
    CHECK(fs::exists(d.path / "s" / "sweep_status.csv"));
    CHECK(lines(slurp(d.path / "s" / "sweep_status.csv")) == 5);
    for (const auto& r : rows) CHECK(fs::exists(d.path / "s" / ("hist_" + r.label + "_seed" + std::to_string(r.seed) + ".csv")));

    REQUIRE(cli("sweep --config " + (d.path / "c.json").string() + " --axis batch_size --values 3 --seeds 5 --out " +
                    (d.path / "one").string(),
                d.path / "o.log") == 0);
    const auto one = eval::read_comparison_csv(d.path / "one" / "comparison.csv");
    REQUIRE(one.size() == 1);
    fs::path ck;
    for (const auto& e : fs::recursive_directory_iterator(d.path / "one")) {
        if (e.path().filename() == "checkpoint_000002.bin") ck = e.path();
    }
    REQUIRE_FALSE(ck.empty());
    REQUIRE(cli("eval --checkpoint " + ck.string() + " --out " + (d.path / "ev").string(), d.path / "e.log") == 0);
    const auto ev = eval::read_metrics_json(d.path / "ev" / "eval_alpha_0.json");
    CHECK(ev.average == one[0].average);
    CHECK(ev.worst == one[0].worst);
    CHECK(ev.cvar == one[0].cvar);

    CHECK(cli("sweep --config " + (d.path / "c.json").string() + " --axis width --values 1", d.path / "e.log") == 2);
    CHECK(cli("sweep --config " + (d.path / "c.json").string() + " --axis batch_size --values 2.5 --out " +
                  (d.path / "bad").string(),
              d.path / "e.log") == 2);
}

TEST_CASE("selftest passes and catches a shrunken sandwich constant") {
    TempDir d("cli_self");
    CHECK(cli("selftest", d.path / "ok.log") == 0);
    const auto log = slurp(d.path / "ok.log");
    std::size_t suites = 0;
    for (std::size_t at = 0; (at = log.find(" PASS ", at)) != std::string::npos; ++at) ++suites;
    CHECK(suites >= 4);
    CHECK(log.find("FAIL") == std::string::npos);
    CHECK(cli("selftest --kappa-offset -1", d.path / "bad.log") == 1);
    CHECK(slurp(d.path / "bad.log").find("FAIL") != std::string::npos);
}

}  // TEST_SUITE

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "fedshade/errors.hpp"
#include "fedshade/experiment.hpp"

using namespace fedshade;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json base_config() {
    return json{
        {"dataset",
         {{"kind", "synthetic"}, {"samples", 12}, {"resolution", 16}, {"channels", 1},
          {"classes", 2}}},
        {"partition",
         {{"client_sizes", {4, 4, 1}}, {"batch_sizes", {2, 2, 1}}, {"label_skew", 0.0}}},
        {"defense", {{"kind", "none"}}},
        {"attacks", json::array({{{"kind", "optimization"}, {"iterations", 40},
                                  {"restarts", 1}}})},
        {"rounds", 3},
        {"attack_rounds", {1, 3}},
        {"attack_clients", {3}},
        {"public_samples", 8},
        {"test_samples", 8},
        {"pretrain",
         {{"generator_steps", 30}, {"latent_steps", 20}, {"reference_epochs", 6}}},
        {"seeds", {{"data", 1}, {"model", 2}, {"defense", 3}, {"attack", 4}}}};
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "fedshade_harness" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

int run_cli(const std::string& args) {
    std::string cmd = std::string(FEDSHADE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

}  // namespace

TEST_CASE("config parsing fills defaults and rejects unknown keys") {
    ExperimentConfig c = parse_experiment_config(base_config());
    CHECK(c.rounds == 3);
    CHECK(c.lr == 0.1);
    CHECK(c.local_rounds == 1);
    CHECK(c.schedule == "increase");
    CHECK(c.seeds.attack == 4);

    json bad = base_config();
    bad["learning_rate"] = 0.1;  // wrong key name
    CHECK_THROWS_AS(parse_experiment_config(bad), ConfigError);
    json bad2 = base_config();
    bad2["dataset"]["resolutoin"] = 16;
    CHECK_THROWS_AS(parse_experiment_config(bad2), ConfigError);
}

TEST_CASE("validation catches out-of-range settings") {
    auto with = [](const std::function<void(json&)>& mutate) {
        json j = base_config();
        mutate(j);
        ExperimentConfig c = parse_experiment_config(j);
        c.out = "unused";
        validate_experiment(c);
    };
    CHECK_THROWS_AS(with([](json& j) { j["rounds"] = 0; }), ConfigError);
    CHECK_THROWS_AS(with([](json& j) { j["attack_rounds"] = {99}; }), ConfigError);
    CHECK_THROWS_AS(with([](json& j) { j["attack_clients"] = {7}; }), ConfigError);
    CHECK_THROWS_AS(with([](json& j) { j["defense"]["kind"] = "soteria"; }), ConfigError);
    CHECK_THROWS_AS(with([](json& j) { j["defense"]["schedule"] = "wobble"; }), ConfigError);
    CHECK_THROWS_AS(with([](json& j) { j["attacks"][0]["kind"] = "analytic"; }), ConfigError);
    CHECK_THROWS_AS(with([](json& j) { j["metric_rounds"] = {2}; }), ConfigError);
    CHECK_THROWS_AS(
        with([](json& j) { j["partition"]["client_sizes"] = {100, 100}; }), ConfigError);
    // the baseline passes
    with([](json&) {});
}

TEST_CASE("default attack rounds scale the paper's {1,25,50,75,100} grid") {
    json j = base_config();
    j["rounds"] = 16;
    j.erase("attack_rounds");
    ExperimentConfig c = parse_experiment_config(j);
    c.out = "unused";
    auto resolved = resolved_config(c);
    CHECK(resolved["attack_rounds"] == json({1, 4, 8, 12, 16}));
    CHECK(resolved["metric_rounds"] == json({1, 4, 8, 12, 16}));
}

TEST_CASE("config hash isolates the defense block") {
    ExperimentConfig a = parse_experiment_config(base_config());
    json j = base_config();
    j["defense"] = {{"kind", "shadow"}};
    ExperimentConfig b = parse_experiment_config(j);
    CHECK(config_hash(resolved_config(a)) != config_hash(resolved_config(b)));
    auto ra = resolved_config(a), rb = resolved_config(b);
    ra.erase("defense");
    rb.erase("defense");
    CHECK(ra == rb);  // everything outside the defense block matches
}

TEST_CASE("repeated runs are byte-identical") {
    ExperimentConfig c = parse_experiment_config(base_config());
    fs::path d1 = fresh_dir("repeat1"), d2 = fresh_dir("repeat2");
    c.out = d1;
    run_experiment(c);
    c.out = d2;
    run_experiment(c);
    for (const char* f : {"manifest.json", "trace/trace.csv", "metrics/leakage.csv",
                          "metrics/iip.csv", "metrics/summary.csv"})
        CHECK(slurp(d1 / f) == slurp(d2 / f));
}

TEST_CASE("report is pure: regenerating the summary reproduces it exactly") {
    ExperimentConfig c = parse_experiment_config(base_config());
    fs::path dir = fresh_dir("report");
    c.out = dir;
    run_experiment(c);
    std::string first = slurp(dir / "metrics" / "summary.csv");
    fs::remove(dir / "metrics" / "summary.csv");
    fs::remove_all(dir / "plots");
    emit_report(dir);
    CHECK(slurp(dir / "metrics" / "summary.csv") == first);
    CHECK(fs::exists(dir / "plots" / "f1.ppm"));
    CHECK(fs::exists(dir / "plots" / "recon_optimization.ppm"));
}

TEST_CASE("empty attack set produces only the F1 plot and trace CSV") {
    json j = base_config();
    j["attacks"] = json::array();
    ExperimentConfig c = parse_experiment_config(j);
    fs::path dir = fresh_dir("noattack");
    c.out = dir;
    RunArtifacts art = run_experiment(c);
    CHECK(art.leakage.empty());
    CHECK(fs::exists(dir / "trace" / "trace.csv"));
    CHECK(fs::exists(dir / "plots" / "f1.ppm"));
    CHECK(!fs::exists(dir / "plots" / "rdlv.ppm"));
    CHECK(fs::is_empty(dir / "recon"));
    CHECK(fs::is_empty(dir / "updates"));
}

TEST_CASE("compare emits one method row block per run") {
    ExperimentConfig c = parse_experiment_config(base_config());
    fs::path d1 = fresh_dir("cmp_none");
    c.out = d1;
    run_experiment(c);
    json j = base_config();
    j["defense"] = {{"kind", "clip"}, {"parameters", {{"threshold", 0.05}}}};
    ExperimentConfig c2 = parse_experiment_config(j);
    fs::path d2 = fresh_dir("cmp_clip");
    c2.out = d2;
    run_experiment(c2);

    fs::path out = fresh_dir("cmp_out") / "table.csv";
    compare_runs({d1, d2}, out);
    std::istringstream in(slurp(out));
    std::string line;
    std::getline(in, line);
    CHECK(line == "method,scope,metric,mean,std");
    int64_t rows = 0, none_rows = 0, clip_rows = 0;
    while (std::getline(in, line)) {
        ++rows;
        if (line.rfind("none,", 0) == 0) ++none_rows;
        if (line.rfind("clip,", 0) == 0) ++clip_rows;
    }
    CHECK(rows == 2 * 2 * 4);  // runs x scopes x metrics
    CHECK(none_rows == 8);
    CHECK(clip_rows == 8);
}

TEST_CASE("failed runs leave a failure-marked manifest and report survives") {
    json j = base_config();
    j["attacks"] = json::array();
    j["dataset"]["kind"] = "image_folder";
    j["dataset"]["path"] = "/nonexistent/images";  // fails at the data stage
    ExperimentConfig c = parse_experiment_config(j);
    fs::path dir = fresh_dir("crash");
    c.out = dir;
    CHECK_THROWS(run_experiment(c));
    json manifest;
    std::ifstream(dir / "manifest.json") >> manifest;
    CHECK(manifest["status"] == "failed");
    CHECK(manifest.contains("error"));
    CHECK_NOTHROW(emit_report(dir));  // gaps are noted, not fatal
}

TEST_CASE("snapshot attack path reproduces the in-run reconstruction") {
    ExperimentConfig c = parse_experiment_config(base_config());
    fs::path dir = fresh_dir("snapshot");
    c.out = dir;
    RunArtifacts art = run_experiment(c);
    AttackConfig ac = c.attacks[0];
    // same effective seed the run used for (attack 0, client 3, round 1)
    const auto& resolved = art.manifest["config"];
    REQUIRE(resolved["attack_clients"] == json({3}));
    AttackResult res = attack_snapshot(dir / "updates" / "r1_c3.ckpt", ac);
    CHECK(res.reconstructions.size() == 1);
    CHECK(res.final_loss >= 0.0);
    CHECK(res.reconstructions[0].shape() == ad::Shape{1, 16, 16});
}

TEST_CASE("cli exit codes follow the 0/1/2 contract") {
    CHECK(run_cli("definitely-not-a-subcommand") == 1);
    CHECK(run_cli("run") == 1);  // missing required --config
    CHECK(run_cli("run --config /nonexistent/missing.json --out /tmp/fedshade_x") == 1);

    // the error message names the missing path
    std::string cmd = std::string(FEDSHADE_CLI_PATH) +
                      " run --config /nonexistent/missing.json --out /tmp/fedshade_x 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::string output;
    char buf[256];
    while (fgets(buf, sizeof(buf), pipe)) output += buf;
    pclose(pipe);
    CHECK(output.find("/nonexistent/missing.json") != std::string::npos);

    fs::path dir = fresh_dir("cli_run");
    fs::path cfg = dir / "cfg.json";
    std::ofstream(cfg) << base_config().dump(2);
    CHECK(run_cli("run --config " + cfg.string() + " --out " + (dir / "out").string()) == 0);
    CHECK(run_cli("report --out " + (dir / "out").string()) == 0);
    CHECK(run_cli("report --out " + (dir / "nothing-here").string()) == 2);
}

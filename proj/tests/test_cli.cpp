// End-to-end checks of the command-line binary: exit-code mapping, per-seed
// artifact naming, byte-identical reruns, and the documented trivial examples
// for prune, recall, compare, and report.  Every case drives the real
// executable (HEADLAB_CLI_PATH) through std::system at desk-miniature scale.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <sys/wait.h>
#include <vector>

#include <nlohmann/json.hpp>

#include "headlab/analysis.hpp"
#include "headlab/csv.hpp"

using namespace headlab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const char* tag) : path(fs::temp_directory_path() / tag) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

// Runs the binary with a shell argument string and returns its exit code.
int run_cli(const std::string& args) {
    const std::string cmd = std::string(HEADLAB_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

// Geometry small enough that a training command costs well under a second.
// Model flags are pretrain-only; every later stage reads geometry from the
// checkpoint and takes just the data flags.
const std::string TINY_DATA = "--n-train 256 --n-dev 64";
const std::string TINY = "--n-layers 2 --n-heads 2 --d-model 32 --d-head 16 --d-ff 64 " + TINY_DATA;

// A two-step trajectory whose realized relative performances all sit at or
// above the 0.9 downstream cut; head sets are nested and nonempty.
const std::string NESTED_TRAJECTORY =
    "step,pruned_ratio,retained_heads,metric_name,metric_value,relative_performance\n"
    "0,0,0:0;0:1;1:0;1:1,accuracy,0.9,1\n"
    "1,0.5,0:0;1:0,accuracy,0.828,0.92\n";

}  // namespace

TEST_CASE("cli maps error classes to the documented exit codes") {
    TempDir dir("headlab_cli_errors");
    // config/input errors -> 2
    REQUIRE(run_cli("prune --checkpoint " + dir.file("absent.ckpt") + " --task mlm --out " + dir.file("o")) == 2);
    REQUIRE(run_cli("pretrain --task bogus --out " + dir.file("o")) == 2);
    REQUIRE(run_cli("pretrain --task text --out " + dir.file("o")) == 2);  // corpus path missing
    REQUIRE(run_cli("prune --task mlm --out " + dir.file("o")) == 2);      // required flag missing
    REQUIRE(run_cli("report --dir " + dir.file("empty")) == 2);            // no trajectory CSVs
    REQUIRE(run_cli("pretrain --steps -3 --out " + dir.file("o")) == 2);
    // finetune on a masked-lm task is a configuration error, not geometry
    REQUIRE(run_cli("pretrain " + TINY + " --steps 0 --seeds 1 --out " + dir.path.string()) == 0);
    REQUIRE(run_cli("finetune --checkpoint " + dir.file("pretrain_seed1.ckpt") + " --task mlm " + TINY_DATA +
                    " --out " + dir.file("o")) == 2);
    // HEADLAB_THREADS is validated before any work happens
    const std::string env_cmd = "HEADLAB_THREADS=abc " + std::string(HEADLAB_CLI_PATH) +
                                " pretrain " + TINY + " --steps 0 --out " + dir.file("o") +
                                " >/dev/null 2>&1";
    int status = std::system(env_cmd.c_str());
    REQUIRE(WIFEXITED(status));
    REQUIRE(WEXITSTATUS(status) == 2);
}

TEST_CASE("cli reports geometry mismatches with exit code 4") {
    TempDir dir("headlab_cli_geometry");
    REQUIRE(run_cli("pretrain " + TINY + " --steps 0 --seeds 1 --out " + dir.path.string()) == 0);
    REQUIRE(run_cli("pretrain --n-layers 2 --n-heads 4 --d-model 32 --d-head 8 --d-ff 64 "
                    "--n-train 256 --n-dev 64 --steps 0 --seeds 2 --out " + dir.path.string()) == 0);
    REQUIRE(run_cli("compare --a " + dir.file("pretrain_seed1.ckpt") + " --b " +
                    dir.file("pretrain_seed2.ckpt") + " --task mlm " + TINY_DATA + " --out " +
                    dir.file("cmp")) == 4);
}

TEST_CASE("pretrain writes one seed-suffixed checkpoint per seed and reruns byte-identically") {
    TempDir dir("headlab_cli_pretrain");
    const std::string cmd =
        "pretrain " + TINY + " --steps 2 --seeds 3,4,5 --out " + dir.path.string();
    REQUIRE(run_cli(cmd) == 0);
    for (int seed : {3, 4, 5}) {
        REQUIRE(fs::exists(dir.file("pretrain_seed" + std::to_string(seed) + ".ckpt")));
        REQUIRE(fs::exists(dir.file("pretrain_seed" + std::to_string(seed) + "_metrics.json")));
    }
    const std::string ckpt = read_text_file(dir.file("pretrain_seed4.ckpt"));
    const std::string metrics = read_text_file(dir.file("pretrain_seed4_metrics.json"));
    const std::string manifest = read_text_file(dir.file("manifest_pretrain.json"));
    REQUIRE(run_cli(cmd) == 0);
    REQUIRE(read_text_file(dir.file("pretrain_seed4.ckpt")) == ckpt);
    REQUIRE(read_text_file(dir.file("pretrain_seed4_metrics.json")) == metrics);
    REQUIRE(read_text_file(dir.file("manifest_pretrain.json")) == manifest);

    // The manifest hashes every output; spot-check one against the bytes.
    auto j = nlohmann::json::parse(manifest);
    bool found = false;
    for (const auto& entry : j.at("outputs")) {
        if (entry.at("path") == dir.file("pretrain_seed4.ckpt")) {
            REQUIRE(entry.at("fnv1a64") == hex_u64(fnv1a64(ckpt)));
            found = true;
        }
    }
    REQUIRE(found);
}

TEST_CASE("prune emits a trajectory whose baseline row is unpruned with relative performance 1") {
    TempDir dir("headlab_cli_prune");
    REQUIRE(run_cli("pretrain " + TINY + " --steps 20 --seeds 1 --out " + dir.path.string()) == 0);
    REQUIRE(run_cli("prune --checkpoint " + dir.file("pretrain_seed1.ckpt") + " --task mlm " + TINY_DATA +
                    " --norm l1 --mode iterative --step-fraction 0.25 --eval-subsample 0 "
                    "--importance-subsample 64 --sweep-seed 9 --out " + dir.path.string()) == 0);
    const std::string name = "trajectory_mlm_l1_iterative_seed9.csv";
    PruneTrajectory t = parse_trajectory_csv(read_text_file(dir.file(name)), name);
    REQUIRE(t.steps.size() == 5);
    REQUIRE(t.steps.front().step == 0);
    REQUIRE(t.steps.front().pruned_ratio == 0.0);
    REQUIRE(t.steps.front().relative_performance == 1.0);
    REQUIRE(t.steps.front().retained.size() == 4);
    REQUIRE(t.steps.back().retained.empty());
}

TEST_CASE("recall over identical trajectories yields a recall column of ones") {
    TempDir dir("headlab_cli_recall");
    write_text_file(dir.file("pre.csv"), NESTED_TRAJECTORY);
    write_text_file(dir.file("down.csv"), NESTED_TRAJECTORY);
    REQUIRE(run_cli("recall --pre " + dir.file("pre.csv") + " --down " + dir.file("down.csv") +
                    " --name same --out " + dir.path.string()) == 0);
    RecallCurve c = parse_recall_csv(read_text_file(dir.file("recall_same.csv")), "recall_same.csv");
    REQUIRE(c.x.size() == 2);
    for (double m : c.mean) REQUIRE(m == 1.0);
    for (double s : c.stddev) REQUIRE(s == 0.0);

    // mismatched pre/down counts are a usage error
    REQUIRE(run_cli("recall --pre " + dir.file("pre.csv") + " --pre " + dir.file("down.csv") +
                    " --down " + dir.file("down.csv") + " --out " + dir.path.string()) == 2);
}

TEST_CASE("compare of a checkpoint with itself emits all-zero divergence and distance tables") {
    TempDir dir("headlab_cli_compare");
    REQUIRE(run_cli("pretrain " + TINY + " --steps 0 --seeds 1 --out " + dir.path.string()) == 0);
    const std::string ckpt = dir.file("pretrain_seed1.ckpt");
    REQUIRE(run_cli("compare --a " + ckpt + " --b " + ckpt + " --task mlm " + TINY_DATA +
                    " --tag self --importance-subsample 32 --out " + dir.path.string()) == 0);
    DivergenceTable div =
        parse_divergence_csv(read_text_file(dir.file("divergence_self.csv")), "divergence_self.csv");
    for (double v : div.mean_js) REQUIRE(v == 0.0);
    for (double v : div.max_js) REQUIRE(v == 0.0);
    LayerDistanceProfile dist =
        parse_distance_csv(read_text_file(dir.file("distance_self.csv")), "distance_self.csv");
    for (double v : dist.mean_l2) REQUIRE(v == 0.0);
    for (double v : dist.max_l2) REQUIRE(v == 0.0);
    REQUIRE(fs::exists(dir.file("correlation_self.csv")));
}

TEST_CASE("report renders every artifact family and reruns byte-identically") {
    TempDir dir("headlab_cli_report");
    // Handwritten artifacts covering all chart families; no training needed.
    write_text_file(dir.file("trajectory_demo_l1_iterative_seed1.csv"), NESTED_TRAJECTORY);
    write_text_file(dir.file("trajectory_demo_l1_iterative_seed2.csv"),
                    "step,pruned_ratio,retained_heads,metric_name,metric_value,relative_performance\n"
                    "0,0,0:0;0:1;1:0;1:1,accuracy,0.88,1\n"
                    "1,0.5,0:1;1:1,accuracy,0.8,0.909090909\n");
    write_text_file(dir.file("recall_demo.csv"),
                    "x,recall_mean,recall_std,seed_values\n"
                    "0.9,0.75,0.25,0.5;1\n"
                    "1,1,0,1;1\n");
    write_text_file(dir.file("divergence_demo.csv"),
                    "layer,head,mean_js_nats,max_js_nats\n0,0,0.01,0.02\n0,1,0.03,0.05\n"
                    "1,0,0.02,0.04\n1,1,0.001,0.002\n");
    write_text_file(dir.file("distance_demo.csv"), "layer,mean_l2,max_l2\n0,0.5,0.9\n1,1.5,2.2\n");
    write_text_file(dir.file("correlation_demo.csv"),
                    "pearson_r,spearman_rho,slope,intercept\n0.9,0.8,2,0.01\n"
                    "layer,head,importance,mean_js_nats\n0,0,0.1,0.01\n0,1,0.5,0.03\n1,0,0.3,0.02\n");
    REQUIRE(run_cli("report --dir " + dir.path.string()) == 0);

    const std::vector<std::string> expected = {
        "curve_demo_l1_iterative.svg", "recall_demo.svg",      "divergence_demo.svg",
        "distance_demo.svg",           "correlation_demo.svg", "summary.json",
        "manifest_report.json"};
    for (const auto& name : expected) REQUIRE(fs::exists(dir.file("report/" + name)));

    auto summary = nlohmann::json::parse(read_text_file(dir.file("report/summary.json")));
    REQUIRE(summary.at("trajectories").contains("demo_l1_iterative"));
    REQUIRE(summary.at("trajectories").at("demo_l1_iterative").at("seeds").size() == 2);
    REQUIRE(summary.at("correlation").at("demo").at("pearson_r").get<double>() == 0.9);

    // Dotted per-seed polylines appear in the pruning chart.
    const std::string curve = read_text_file(dir.file("report/curve_demo_l1_iterative.svg"));
    REQUIRE(curve.find("stroke-dasharray") != std::string::npos);
    REQUIRE(curve.find("seed 1") != std::string::npos);
    REQUIRE(curve.find("seed 2") != std::string::npos);

    std::vector<std::string> before;
    for (const auto& name : expected) before.push_back(read_text_file(dir.file("report/" + name)));
    REQUIRE(run_cli("report --dir " + dir.path.string()) == 0);
    for (size_t i = 0; i < expected.size(); ++i)
        REQUIRE(read_text_file(dir.file("report/" + expected[i])) == before[i]);
}

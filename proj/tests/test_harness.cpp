#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "parl/harness.hpp"
#include "parl/metrics.hpp"

using namespace parl;
namespace fs = std::filesystem;

namespace {

ExperimentConfig fast_config(const std::string& out_dir) {
    ExperimentConfig cfg;
    cfg.model.vocab_size = 16;
    cfg.model.d_model = 16;
    cfg.model.n_layers = 1;
    cfg.model.n_heads = 2;
    cfg.model.d_ff = 16;
    cfg.model.max_seq_len = 48;
    cfg.batch = BatchSpec{2, 4, 2};
    cfg.task.vocab_subset = 8;
    cfg.task.dataset_size = 8;
    cfg.rollout.max_new_tokens = 4;
    cfg.run.steps = 3;
    cfg.run.out_dir = out_dir;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& sub = "") const {
        return (sub.empty() ? path : path / sub).string();
    }
};

}  // namespace

TEST_CASE("config json round-trip, overrides and validation") {
    ExperimentConfig cfg;
    std::string text = cfg.to_json_text();
    ExperimentConfig back = ExperimentConfig::from_json_text(text);
    CHECK(back.to_json_text() == text);
    CHECK(back.config_hash() == cfg.config_hash());

    cfg.apply_override("run.mode", "sync");
    CHECK(cfg.run.mode == RunMode::sync);
    cfg.apply_override("hyper.lr", "0.25");
    CHECK(cfg.hyper.lr == 0.25);
    cfg.apply_override("batch.microbatch_size", "8");
    CHECK(cfg.batch.microbatch_size == 8);
    CHECK(cfg.config_hash() != back.config_hash());

    CHECK_THROWS_AS(cfg.apply_override("run.bogus", "1"), ConfigError);
    CHECK_THROWS_AS(cfg.apply_override("nodots", "1"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json_text("{\"model\": {\"bogus\": 1}}"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::from_json_text("not json"), ConfigError);

    ExperimentConfig bad;
    bad.batch.microbatch_size = 3;  // 32 % 3 != 0
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("valid m values"), ConfigError);
}

TEST_CASE("train: steps=0 writes manifest and empty metrics, exit 0") {
    TempDir dir("parl_steps0");
    ExperimentConfig cfg = fast_config(dir.str("run"));
    cfg.run.steps = 0;
    std::ostringstream log;
    CHECK(run_train(cfg, log) == kExitOk);
    CHECK(fs::exists(dir.path / "run" / "manifest.json"));
    CHECK(fs::exists(dir.path / "run" / "metrics.jsonl"));
    CHECK(fs::file_size(dir.path / "run" / "metrics.jsonl") == 0);
    Manifest m = read_manifest(dir.str("run") + "/manifest.json");
    CHECK(m.config_hash == cfg.config_hash());
    // every artifact in the manifest exists on disk
    for (const auto& a : m.artifacts) CHECK(fs::exists(dir.path / "run" / a));
}

TEST_CASE("train: invalid m fails validation with the constraint named") {
    TempDir dir("parl_badm");
    ExperimentConfig cfg = fast_config(dir.str("run"));
    cfg.batch.microbatch_size = 3;
    std::ostringstream log;
    CHECK(run_train(cfg, log) == kExitValidation);
    CHECK(log.str().find("valid m values") != std::string::npos);
}

TEST_CASE("train twice with one seed: byte-identical metrics in canonical mode") {
    TempDir dir("parl_repro");
    ExperimentConfig cfg = fast_config(dir.str("a"));
    cfg.hyper.accumulation = AccumulationMode::canonical;
    std::ostringstream log;
    REQUIRE(run_train(cfg, log) == kExitOk);
    cfg.run.out_dir = dir.str("b");
    REQUIRE(run_train(cfg, log) == kExitOk);
    CHECK(slurp(dir.path / "a" / "metrics.jsonl") == slurp(dir.path / "b" / "metrics.jsonl"));
    CHECK(slurp(dir.path / "a" / "reward_curve.tsv") == slurp(dir.path / "b" / "reward_curve.tsv"));
    // out_dir differs, so manifests differ; metrics and checkpoints must not
    CHECK(slurp(dir.path / "a" / "policy.ckpt") == slurp(dir.path / "b" / "policy.ckpt"));
}

TEST_CASE("compare: reflexive pass, sync-vs-async pass, seed mismatch refused") {
    TempDir dir("parl_compare");
    ExperimentConfig cfg = fast_config(dir.str("sync"));
    cfg.hyper.accumulation = AccumulationMode::canonical;
    cfg.run.mode = RunMode::sync;
    std::ostringstream log;
    REQUIRE(run_train(cfg, log) == kExitOk);

    ExperimentConfig async_cfg = cfg;
    async_cfg.run.mode = RunMode::async;
    async_cfg.run.out_dir = dir.str("async");
    REQUIRE(run_train(async_cfg, log) == kExitOk);

    std::ostringstream out;
    CHECK(run_compare({dir.str("sync"), dir.str("sync"), 0.0}, out) == kExitOk);
    out.str("");
    CHECK(run_compare({dir.str("sync"), dir.str("async"), 1e-9}, out) == kExitOk);
    CHECK(out.str().find("bit-identical") != std::string::npos);

    ExperimentConfig other_seed = cfg;
    other_seed.run.seed = 123;
    other_seed.run.out_dir = dir.str("seed123");
    REQUIRE(run_train(other_seed, log) == kExitOk);
    out.str("");
    CHECK(run_compare({dir.str("sync"), dir.str("seed123"), 1e-9}, out) == kExitValidation);
    CHECK(out.str().find("refused") != std::string::npos);
}

TEST_CASE("compare: runs that drift past the tolerance fail with exit 3") {
    TempDir dir("parl_cmp_fail");
    ExperimentConfig a = fast_config(dir.str("a"));
    a.hyper.accumulation = AccumulationMode::canonical;
    a.run.steps = 5;
    std::ostringstream log;
    REQUIRE(run_train(a, log) == kExitOk);
    ExperimentConfig b = a;
    b.run.out_dir = dir.str("b");
    b.hyper.accumulation = AccumulationMode::arrival;  // may differ; introduces reorder drift
    REQUIRE(run_train(b, log) == kExitOk);
    std::ostringstream out;
    int rc = run_compare({dir.str("a"), dir.str("b"), 0.0}, out);  // zero tolerance
    // identical content passes reflexively; any drift must map to exit 3
    if (rc != kExitOk) CHECK(rc == kExitComparison);
}

TEST_CASE("metrics records are self-describing and in step order") {
    TempDir dir("parl_metrics");
    ExperimentConfig cfg = fast_config(dir.str("run"));
    std::ostringstream log;
    REQUIRE(run_train(cfg, log) == kExitOk);
    auto records = read_metrics(dir.str("run") + "/metrics.jsonl");
    REQUIRE(records.size() == 3);
    for (long i = 0; i < 3; ++i) {
        CHECK(records[i].step == i);
        CHECK(records[i].run_id == cfg.run_id());
        CHECK(records[i].tokens_trained > 0);
    }
}

TEST_CASE("simulate: trace table reports the formula values") {
    TempDir dir("parl_sim");
    std::ofstream trace(dir.str("trace.txt"));
    trace << "3 5\n2 4\n";
    trace.close();
    SimulateOptions opts;
    opts.trace_path = dir.str("trace.txt");
    opts.train_cost = 0.5;
    opts.m_train = 1;
    std::ostringstream out;
    REQUIRE(run_simulate(opts, out) == kExitOk);
    CHECK(out.str().find("sync\t9") != std::string::npos);
    CHECK(out.str().find("async\t3") != std::string::npos);

    SimulateOptions sweep;
    sweep.multipliers = {1, 2, 4};
    out.str("");
    REQUIRE(run_simulate(sweep, out) == kExitOk);
    CHECK(out.str().find("tps_ratio") != std::string::npos);

    SimulateOptions nothing;
    CHECK(run_simulate(nothing, out) == kExitValidation);
}

TEST_CASE("gradcheck: vacuous pass with warning, fault injection fails") {
    std::ostringstream out;
    GradcheckOptions opts;
    opts.trials = 0;
    opts.with_backward_suite = false;
    CHECK(run_gradcheck(opts, out) == kExitOk);
    CHECK(out.str().find("warning") != std::string::npos);

    GradcheckOptions fault;
    fault.trials = 1;
    fault.with_backward_suite = false;
    fault.inject_fault = true;
    out.str("");
    CHECK(run_gradcheck(fault, out) == kExitComparison);
    CHECK(out.str().find("FAIL") != std::string::npos);
}

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "parl/harness.hpp"

namespace {

parl::ExperimentConfig load_with_overrides(const std::string& config_path,
                                           const std::vector<std::string>& overrides) {
    parl::ExperimentConfig cfg;
    if (!config_path.empty()) cfg = parl::load_config(config_path);
    for (const auto& ov : overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos)
            throw parl::ConfigError("override must look like key=value, got '" + ov + "'");
        cfg.apply_override(ov.substr(0, eq), ov.substr(eq + 1));
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"parl: periodic asynchronous RL at desk scale"};
    app.require_subcommand(1);

    std::string config_path, out_dir, mode;
    std::vector<std::string> overrides;
    long steps = -1;
    long long seed = -1;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON experiment config");
        cmd->add_option("--override", overrides, "dotted-path override, e.g. run.mode=sync")
            ->take_all();
        cmd->add_option("--out", out_dir, "output directory (run.out_dir)");
        cmd->add_option("--seed", seed, "run seed (run.seed)");
        cmd->add_option("--mode", mode, "sync or async (run.mode)");
        cmd->add_option("--steps", steps, "iterations (run.steps)");
    };

    CLI::App* train = app.add_subcommand("train", "run a training experiment");
    add_common(train);

    CLI::App* compare = app.add_subcommand("compare", "diff two finished runs");
    std::string run_a, run_b;
    double tolerance = 1e-9;
    compare->add_option("run_a", run_a, "first run directory")->required();
    compare->add_option("run_b", run_b, "second run directory")->required();
    compare->add_option("--tolerance", tolerance, "numeric tolerance");

    CLI::App* simulate = app.add_subcommand("simulate", "virtual-clock timing experiments");
    std::string trace_path, sim_out;
    std::vector<int> multipliers;
    double train_cost = 0.25, sync_cost = 0.0;
    int m_train = 1;
    bool continuous = false;
    simulate->add_option("--trace", trace_path, "latency trace file (one wave per line)");
    simulate->add_option("--multipliers", multipliers, "weak-scaling device multipliers")
        ->delimiter(',');
    simulate->add_option("--train-cost", train_cost, "virtual seconds per micro-step");
    simulate->add_option("--m-train", m_train, "samples per training micro-step");
    simulate->add_option("--sync-cost", sync_cost, "virtual seconds per weight sync");
    simulate->add_flag("--continuous", continuous, "continuous batching instead of waves");
    simulate->add_option("--out", sim_out, "write the table to this TSV file");

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suites");
    long long gc_seed = 7;
    int gc_trials = 20;
    double gc_threshold = 1e-6;
    bool inject_fault = false, skip_backward = false;
    gradcheck->add_option("--seed", gc_seed, "trial seed");
    gradcheck->add_option("--trials", gc_trials, "number of GRPO loss trials");
    gradcheck->add_option("--threshold", gc_threshold, "max relative error");
    gradcheck->add_flag("--inject-gradient-fault", inject_fault,
                        "corrupt one analytic gradient entry (negative control)");
    gradcheck->add_flag("--skip-backward-suite", skip_backward, "only run the GRPO trials");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            parl::ExperimentConfig cfg = load_with_overrides(config_path, overrides);
            if (!out_dir.empty()) cfg.run.out_dir = out_dir;
            if (seed >= 0) cfg.run.seed = static_cast<std::uint64_t>(seed);
            if (steps >= 0) cfg.run.steps = steps;
            if (!mode.empty()) cfg.apply_override("run.mode", mode);
            return parl::run_train(cfg, std::cout);
        }
        if (compare->parsed()) {
            parl::CompareOptions opts{run_a, run_b, tolerance};
            return parl::run_compare(opts, std::cout);
        }
        if (simulate->parsed()) {
            parl::SimulateOptions opts;
            opts.trace_path = trace_path;
            opts.multipliers = multipliers;
            opts.train_cost = train_cost;
            opts.m_train = m_train;
            opts.sync_cost = sync_cost;
            opts.continuous = continuous;
            opts.out_path = sim_out;
            return parl::run_simulate(opts, std::cout);
        }
        if (gradcheck->parsed()) {
            parl::GradcheckOptions opts;
            opts.seed = static_cast<std::uint64_t>(gc_seed);
            opts.trials = gc_trials;
            opts.threshold = gc_threshold;
            opts.inject_fault = inject_fault;
            opts.with_backward_suite = !skip_backward;
            return parl::run_gradcheck(opts, std::cout);
        }
    } catch (const parl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return parl::kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return parl::kExitRuntime;
    }
    return parl::kExitValidation;
}

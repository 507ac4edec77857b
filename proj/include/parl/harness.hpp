#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "parl/config.hpp"
#include "parl/event_sim.hpp"

namespace parl {

// Exit codes shared by the library entry points and the CLI.
constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitComparison = 3;

// Runs T iterations in the configured mode; writes metrics.jsonl,
// reward_curve.tsv, three checkpoints and manifest.json into run.out_dir.
int run_train(const ExperimentConfig& config, std::ostream& log);

struct CompareOptions {
    std::string run_a;
    std::string run_b;
    double tolerance = 1e-9;
};

int run_compare(const CompareOptions& opts, std::ostream& log);

struct SimulateOptions {
    std::string trace_path;          // optional: evaluate a trace file
    std::vector<int> multipliers;    // optional: weak-scaling sweep
    ScalingWorkload workload;
    double train_cost = 0.25;
    int m_train = 1;
    double sync_cost = 0.0;
    bool continuous = false;         // inference model for trace playback
    std::string out_path;            // optional TSV copy of the table
};

int run_simulate(const SimulateOptions& opts, std::ostream& log);

struct GradcheckOptions {
    std::uint64_t seed = 7;
    int trials = 20;
    double threshold = 1e-6;
    bool inject_fault = false;
    bool with_backward_suite = true;
};

int run_gradcheck(const GradcheckOptions& opts, std::ostream& log);

}  // namespace parl

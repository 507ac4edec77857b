#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "parl/errors.hpp"

namespace parl {

// Per-prompt completion durations, one inner list per inference batch (wave):
// batches[j][i] is the time the i-th prompt of the j-th wave needs.
struct LatencyTrace {
    std::vector<std::vector<double>> batches;

    void validate() const;
    int waves() const { return static_cast<int>(batches.size()); }
    int slots() const { return batches.empty() ? 0 : static_cast<int>(batches[0].size()); }
    int total_prompts() const;
    bool rectangular() const;
};

// Training startup latency under synchronous scheduling: sum over waves of
// the slowest prompt in each wave.
double t_sync(const LatencyTrace& trace);

// Training startup latency under asynchronous scheduling: earliest-completed
// prompt of the first wave.
double t_async(const LatencyTrace& trace);

enum class SimMode { sync, async };
enum class InferenceModel { wave, continuous };

struct SimReport {
    SimMode mode = SimMode::sync;
    double t_sync_startup = 0.0;
    double t_async_startup = 0.0;
    double makespan = 0.0;
    double sync_cost = 0.0;
    int micro_steps = 0;
    double trainer_busy = 0.0;
    double trainer_idle = 0.0;
    double inference_idle = 0.0;
    long tokens = 0;
    int devices = 1;
    double tps = 0.0;    // tokens / makespan
    double tpspd = 0.0;  // tokens / (makespan * devices)
};

// One training iteration on the virtual clock. Sync serializes all inference
// before training; async trains micro-steps of `m_train` prompts as soon as
// enough completions are available and the trainer is free.
// `inference_model`: wave replays the trace as static batches (matching the
// startup formulas exactly); continuous refills slots as requests finish.
SimReport simulate_iteration(SimMode mode, const LatencyTrace& trace,
                             double train_cost_per_microstep, int m_train, double sync_cost,
                             InferenceModel inference_model = InferenceModel::wave,
                             long tokens_per_prompt = 1, int devices = 1);

// Weak-scaling workload: every multiplier s runs s shards in parallel, each
// shard a trainer plus `base_instances` inference instances working a
// same-sized random trace; the sync barrier cost grows with total devices.
struct ScalingWorkload {
    int base_trainers = 1;
    int base_instances = 4;  // 1:4 train:inference ratio
    int waves = 8;
    int slots = 8;
    double mean_duration = 1.0;
    double duration_spread = 0.5;  // durations ~ U(mean-spread, mean+spread)
    std::uint64_t seed = 1;
    double train_cost_per_microstep = 0.25;
    int m_train = 1;
    double sync_cost_base = 2.0;
    double sync_cost_per_device = 0.5;
    long tokens_per_prompt = 64;
};

std::vector<SimReport> scaling_experiment(const ScalingWorkload& workload,
                                          const std::vector<int>& multipliers);

// Trace file io: one wave per line, space-separated positive durations.
LatencyTrace load_trace(const std::string& path);
void save_trace(const std::string& path, const LatencyTrace& trace);

}  // namespace parl

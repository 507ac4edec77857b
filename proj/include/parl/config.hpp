#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "parl/event_sim.hpp"
#include "parl/model.hpp"
#include "parl/pipeline.hpp"
#include "parl/rollout.hpp"
#include "parl/tasks.hpp"

namespace parl {

struct RolloutConfig {
    int instances = 2;
    int batch_slots = 4;
    LatencyModel latency;
    BatchingMode batching = BatchingMode::continuous;
    double temperature = 1.0;
    int max_new_tokens = 8;
};

struct RunConfig {
    RunMode mode = RunMode::async;
    long steps = 200;
    std::uint64_t seed = 7;
    bool shared_prompt = false;
    bool shuffle = true;
    std::string out_dir = "runs/default";
    double train_cost_per_microstep = 0.5;
    std::size_t queue_capacity = 0;  // 0 -> N*G
    int stall_timeout_ms = 10000;
};

struct ExperimentConfig {
    ModelConfig model;
    BatchSpec batch{4, 8, 4};  // N, G, m
    HyperParams hyper;
    RolloutConfig rollout;
    TaskSpec task;
    RunConfig run;

    void validate() const;
    PipelineSettings pipeline_settings() const;

    // Canonical JSON round-trip; unknown keys are rejected so typos fail
    // loudly. The dotted-path override grammar is "section.key=value".
    static ExperimentConfig from_json_text(const std::string& text);
    std::string to_json_text() const;
    void apply_override(const std::string& dotted_key, const std::string& value);

    // FNV-1a over the canonical JSON dump; stable across reruns.
    std::uint64_t config_hash() const;
    std::string run_id() const;

    GenConfig gen_config() const;
};

ExperimentConfig load_config(const std::string& path);

}  // namespace parl

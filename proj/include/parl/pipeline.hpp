#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "parl/grpo.hpp"
#include "parl/model.hpp"
#include "parl/packing.hpp"
#include "parl/queue.hpp"
#include "parl/rollout.hpp"
#include "parl/tasks.hpp"

namespace parl {

// Where the PPO ratio denominator comes from. rollout_weights scores pi_old
// at generation time (ratio 1 on the first forward); one_step_delayed keeps
// the previous step's snapshot in the old-policy buffer and recomputes
// logprobs in the trainer.
enum class OldPolicyMode { rollout_weights, one_step_delayed };

// arrival accumulates per-sample gradients in queue order; canonical stages
// dequeued samples and releases micro-batches in (prompt, rollout) order so
// the accumulation chain is identical to the synchronous run, bit for bit.
enum class AccumulationMode { arrival, canonical };

enum class RunMode { sync, async };

struct HyperParams {
    double lr = 0.1;
    double epsilon = 0.2;
    double beta = 0.04;
    LossGranularity granularity = LossGranularity::token;
    OldPolicyMode old_policy = OldPolicyMode::one_step_delayed;
    AccumulationMode accumulation = AccumulationMode::arrival;
    bool advantage_mean_only = false;
};

// Policy (trainable), old-policy (snapshot buffer) and reference (frozen
// initial weights), identically shaped.
struct TriModel {
    ModelParams policy;
    ModelParams old_policy;
    ModelParams reference;

    static TriModel init(const ModelConfig& config, std::uint64_t seed);
    void snapshot_old_policy();  // old_policy <- policy, elementwise
};

struct TriForwardResult {
    ForwardResult policy;               // cached, ready for backward
    std::vector<double> old_logprobs;   // aligned with policy.scored_positions
    std::vector<double> ref_logprobs;
};

// Three evaluations over identical tokens/positions/mask; only the policy
// pass keeps activations.
TriForwardResult trimodel_forward(const TriModel& tm, std::span<const TokenId> tokens,
                                  std::span<const int> positions, const AttentionMaskSpec& mask,
                                  std::span<const std::int32_t> labels);

struct IterationReport {
    long step = 0;
    double reward_mean = 0.0, reward_min = 0.0, reward_max = 0.0;
    double loss = 0.0;  // batch objective J
    double kl_mean = 0.0;
    double clip_fraction = 0.0;
    long tokens_trained = 0;
    long samples_consumed = 0;
    double t_first_sample = 0.0;  // virtual training startup latency
    double t_iteration = 0.0;     // virtual makespan of the iteration
    long queue_max_depth = 0;
};

struct PipelineSettings {
    BatchSpec batch;
    HyperParams hyper;
    GenConfig gen;
    TaskSpec task;
    bool shared_prompt = false;
    double train_cost_per_microstep = 0.5;  // virtual seconds
    std::uint64_t run_seed = 7;
    std::size_t queue_capacity = 0;  // 0 -> N*G
    int stall_timeout_ms = 10000;
    int test_drop_groups = 0;  // fault injection: producer drops the last k groups

    void validate(const ModelConfig& model) const;
};

// Producer/queue/consumer wiring of one training run. The driver thread is
// the consumer and owns the TriModel; each iteration spawns one producer
// thread which dispatches prompts, scores rewards and group advantages, and
// feeds scored samples through the bounded queue.
class Pipeline {
public:
    Pipeline(PipelineSettings settings, TriModel& trimodel, RolloutService& service,
             Dataloader& dataloader);

    IterationReport run_iteration(RunMode mode, long step);

    // Algorithm step "move policy weights into the old-policy modules";
    // refuses to run while a batch is being consumed.
    void snapshot_old_policy();

    const PipelineSettings& settings() const { return settings_; }
    BoundedQueue<Sample>& queue() { return queue_; }

private:
    struct MicrobatchStats {
        double objective_sum = 0.0;
        double clip_sum = 0.0;
        double kl_sum = 0.0;
        long clipped_units = 0;
        long total_units = 0;
        int micro_batches = 0;
    };

    void train_microbatch(std::vector<Sample>& samples, GradBuffer& grads,
                          MicrobatchStats& stats);

    PipelineSettings settings_;
    TriModel& trimodel_;
    RolloutService& service_;
    Dataloader& dataloader_;
    BoundedQueue<Sample> queue_;
    bool in_batch_ = false;
};

}  // namespace parl

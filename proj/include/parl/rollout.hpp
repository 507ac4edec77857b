#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "parl/model.hpp"

namespace parl {

// Virtual-time cost of serving one request. deterministic_trace replays a
// fixed table of durations (per instance, wave-ordered); per_token_cost
// charges prefill/decode per token with seeded multiplicative jitter.
struct LatencyModel {
    enum class Kind { deterministic_trace, per_token_cost };
    Kind kind = Kind::per_token_cost;
    double prefill_cost = 0.001;  // virtual seconds per prompt token
    double decode_cost = 0.02;    // virtual seconds per generated token
    double jitter = 0.1;          // +/- fraction of the base cost
    std::vector<std::vector<double>> trace;  // deterministic_trace only

    void validate() const;
};

// How an instance schedules its queued requests onto its batch slots.
// continuous refills a slot the moment a request finishes; wave starts the
// next group of `slots` requests only after the current wave drains (the
// static-batch model behind the startup-latency formulas).
enum class BatchingMode { continuous, wave };

struct GenConfig {
    int max_new_tokens = 8;
    double temperature = 1.0;
};

struct RolloutRequest {
    std::int64_t prompt_id = 0;
    int group_slot = 0;  // prompt index within the training batch
    std::int64_t group_id = 0;
    std::vector<TokenId> prompt;
};

struct RolloutResult {
    std::int64_t prompt_id = 0;
    int group_slot = 0;
    int rollout_index = 0;
    std::int64_t group_id = 0;
    std::vector<TokenId> prompt;
    std::vector<TokenId> response;
    std::vector<double> old_logprobs;  // scored under the synced weights
    double completion_time = 0.0;      // virtual seconds since dispatch
    int instance_id = 0;
};

// Simulated inference service: `n_instances` identical workers, each with
// `max_batch_slots` concurrent slots. Weights are broadcast at iteration
// boundaries; requests are dispatched round-robin; generation content
// depends only on (weights, prompt, per-request seed), never on placement
// or the latency model.
class RolloutService {
public:
    RolloutService(int n_instances, int max_batch_slots, LatencyModel latency,
                   BatchingMode batching = BatchingMode::continuous);

    // Broadcast a copy of `params` to every instance. Only legal at an
    // iteration boundary (no generation in flight).
    void sync_weights(const ModelParams& params);

    int instance_count() const { return static_cast<int>(instances_.size()); }
    int batch_slots() const { return max_batch_slots_; }
    std::uint64_t synced_version(int instance) const;
    bool weights_synced() const { return synced_; }
    bool idle() const { return !busy_.load(); }

    // Expands each prompt into `rollouts_per_group` requests (per-request
    // seed = mix(seed, prompt_id, rollout_index)), generates everything, and
    // invokes on_result once per request in completion-time order
    // (ties: lowest prompt_id, then rollout_index). Consumes the sync.
    void submit_prompts(std::span<const RolloutRequest> prompts, int rollouts_per_group,
                        const GenConfig& gen, std::uint64_t seed,
                        const std::function<void(RolloutResult)>& on_result);

    std::vector<RolloutResult> submit_prompts_collect(std::span<const RolloutRequest> prompts,
                                                      int rollouts_per_group,
                                                      const GenConfig& gen, std::uint64_t seed);

    // log pi_synced(o_t | q, o_<t) for every response token, under the given
    // instance's current weights.
    std::vector<double> score_logprobs(int instance, std::span<const TokenId> prompt,
                                       std::span<const TokenId> response) const;

    // Per-instance request count of the last submit (even-dispatch checks).
    const std::vector<int>& last_dispatch_counts() const { return last_dispatch_counts_; }

private:
    struct Instance {
        int id = 0;
        std::optional<ModelParams> params;
    };

    std::vector<Instance> instances_;
    int max_batch_slots_;
    LatencyModel latency_;
    BatchingMode batching_;
    bool synced_ = false;
    std::atomic<bool> busy_{false};
    std::vector<int> last_dispatch_counts_;
};

}  // namespace parl

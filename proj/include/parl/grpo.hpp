#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "parl/errors.hpp"
#include "parl/model.hpp"

namespace parl {

// One rollout flowing through the queue: prompt, sampled response, reward and
// its group-relative advantage, plus per-token reference logprobs filled in
// by whichever stage owns them (see pipeline).
struct Sample {
    std::int64_t prompt_id = 0;      // stable id of the prompt occurrence
    int group_slot = 0;              // prompt index within the batch
    int rollout_index = 0;           // 0..G-1 within the group
    std::int64_t group_id = 0;       // unique per (iteration, prompt)
    std::vector<TokenId> prompt;
    std::vector<TokenId> response;
    double reward = 0.0;
    double advantage = 0.0;
    std::vector<double> old_logprobs;  // log pi_old per response token
    std::vector<double> ref_logprobs;  // log pi_ref per response token
    double completion_time = 0.0;      // virtual seconds (group release time)
};

struct BatchSpec {
    int prompts_per_batch = 0;   // N
    int rollouts_per_group = 0;  // G
    int microbatch_size = 0;     // m

    int batch_samples() const { return prompts_per_batch * rollouts_per_group; }
    int micro_count() const { return batch_samples() / microbatch_size; }  // M = NG/m
    void validate() const;
};

enum class LossGranularity { token, sequence };

struct LossReport {
    double objective = 0.0;       // J for this micro-batch
    double clip_term_mean = 0.0;  // mean_j L_j
    double kl_mean = 0.0;         // mean_j KL_j
    double clip_fraction = 0.0;   // fraction of scoring units where the clip bound was active
    long token_count = 0;         // response tokens scored
};

// A_i = (r_i - mean) / population std; all zeros when std < 1e-8.
std::vector<double> group_advantages(std::span<const double> rewards);

// Variant used when hyper.advantage_mode == "mean_only": A_i = r_i - mean.
std::vector<double> group_advantages_mean_only(std::span<const double> rewards);

// min(r*A, clip(r, 1-eps, 1+eps)*A) with r = exp(logp_new - logp_old).
double clipped_term(double logp_new, double logp_old, double advantage, double epsilon);

// rho - log(rho) - 1 with rho = exp(logp_ref - logp_new); >= 0 for finite input.
double kl_term(double logp_new, double logp_ref);

// Per-sample pieces of the objective, unscaled by 1/m. upstream[t] is
// d(L_j - beta*KL_j)/d(policy logprob t) so callers can choose their own
// accumulation scaling.
struct SampleTerms {
    double clip_term = 0.0;  // L_j
    double kl = 0.0;         // KL_j
    int clipped_units = 0;
    int total_units = 0;
    std::vector<double> upstream;  // per response token
};

SampleTerms per_sample_terms(const Sample& sample, std::span<const double> policy_logprobs,
                             double epsilon, double beta, LossGranularity granularity);

struct MicrobatchLoss {
    double loss = 0.0;  // -(1/m) sum_j (L_j - beta*KL_j)
    std::vector<std::vector<double>> upstream;  // d(loss)/d(policy logprobs), per sample
    LossReport report;
};

MicrobatchLoss grpo_microbatch_loss(std::span<const Sample> samples,
                                    const std::vector<std::vector<double>>& policy_logprobs,
                                    double epsilon, double beta, LossGranularity granularity);

enum class SplitPolicy { arrival_order, group_major };

// Partition into M = |batch|/m micro-batches. arrival_order keeps the given
// order; group_major stably sorts whole groups together first.
std::vector<std::vector<Sample>> split_microbatches(std::vector<Sample> batch, int m,
                                                    SplitPolicy policy);

}  // namespace parl

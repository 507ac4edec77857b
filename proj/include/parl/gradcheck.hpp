#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "parl/model.hpp"

namespace parl {

// Relative error with an absolute floor: |a-b| / max(|a|, |b|, floor).
// Entries smaller than the floor are effectively compared absolutely at
// floor * threshold precision.
double rel_err(double a, double b, double floor = 1e-4);

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_tensor;
    std::size_t worst_index = 0;  // within the tensor
    bool passed = false;
};

// Central finite differences of a smooth scalar loss sum(upstream * logprob)
// against the analytic backward, over every parameter.
GradCheckResult gradcheck_backward(const ModelConfig& config, std::uint64_t seed,
                                   double threshold = 1e-6, double fd_step = 1e-5,
                                   int seq_len = 6);

// Central finite differences of the full GRPO micro-batch loss through the
// model on a small random instance. Old/reference logprobs are frozen offsets
// of the initial policy logprobs, chosen so every ratio sits well away from
// the clip boundaries (the loss stays smooth within the FD step).
GradCheckResult gradcheck_grpo_trial(std::uint64_t seed, double threshold = 1e-6,
                                     double fd_step = 1e-5, bool inject_fault = false);

struct GradCheckSummary {
    int trials = 0;
    double max_rel_err = 0.0;
    bool passed = true;
    std::vector<GradCheckResult> results;
};

GradCheckSummary run_gradcheck_trials(std::uint64_t seed, int trials, double threshold = 1e-6,
                                      bool inject_fault = false);

}  // namespace parl

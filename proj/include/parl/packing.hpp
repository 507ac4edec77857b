#pragma once

#include <span>
#include <vector>

#include "parl/model.hpp"

namespace parl {

// A shared-prompt packed micro-batch: [prompt | response_1 | ... | response_k]
// with positions restarted at |prompt| for every response, prompt labels
// ignored, and spans locating each response inside `tokens`.
struct PackedGroup {
    std::vector<TokenId> tokens;
    std::vector<std::int32_t> labels;
    std::vector<int> positions;
    AttentionMaskSpec mask;
    struct Span {
        int start = 0;
        int len = 0;
    };
    std::vector<Span> spans;  // one per response, covering tokens beyond the prompt
};

PackedGroup pack_group(std::span<const TokenId> prompt,
                       const std::vector<std::vector<TokenId>>& responses, int max_seq_len);

// Boolean attend matrix (row i attends to column j) for the shared-prompt
// rule; row-major [n x n] with n = prompt_len + sum(response_lens).
std::vector<bool> build_shared_prompt_mask(int prompt_len, std::span<const int> response_lens);

// Slices the flat scored-logprob vector of a packed forward back into one
// vector per response.
std::vector<std::vector<double>> extract_response_logprobs(std::span<const double> logprobs,
                                                           const PackedGroup& packed);

}  // namespace parl

#include "parl/packing.hpp"

#include <string>

namespace parl {

PackedGroup pack_group(std::span<const TokenId> prompt,
                       const std::vector<std::vector<TokenId>>& responses, int max_seq_len) {
    if (prompt.empty()) throw ShapeError("pack_group: empty prompt");
    if (responses.empty()) throw ShapeError("pack_group: no responses");
    std::size_t total = prompt.size();
    for (const auto& r : responses) {
        if (r.empty()) throw ShapeError("pack_group: empty response");
        total += r.size();
    }
    if (total > static_cast<std::size_t>(max_seq_len))
        throw ShapeError("pack_group: packed length " + std::to_string(total) +
                         " for group of " + std::to_string(responses.size()) +
                         " responses exceeds max_seq_len " + std::to_string(max_seq_len));

    PackedGroup pg;
    pg.tokens.reserve(total);
    pg.labels.reserve(total);
    pg.positions.reserve(total);

    const int p_len = static_cast<int>(prompt.size());
    for (int i = 0; i < p_len; ++i) {
        pg.tokens.push_back(prompt[i]);
        pg.labels.push_back(kIgnoreLabel);
        pg.positions.push_back(i);
    }
    std::vector<int> lens;
    for (const auto& r : responses) {
        PackedGroup::Span span{static_cast<int>(pg.tokens.size()), static_cast<int>(r.size())};
        for (std::size_t i = 0; i < r.size(); ++i) {
            pg.tokens.push_back(r[i]);
            pg.labels.push_back(r[i]);  // self-aligned: scored from the logical predecessor
            pg.positions.push_back(p_len + static_cast<int>(i));
        }
        pg.spans.push_back(span);
        lens.push_back(span.len);
    }
    pg.mask = AttentionMaskSpec::shared_prompt(p_len, lens);
    return pg;
}

std::vector<bool> build_shared_prompt_mask(int prompt_len, std::span<const int> response_lens) {
    if (prompt_len < 1) throw ShapeError("prompt_len must be >= 1");
    for (int r : response_lens)
        if (r < 1) throw ShapeError("response lengths must be >= 1");

    int n = prompt_len;
    for (int r : response_lens) n += r;
    // segment id per index: 0 = prompt, k = k-th response
    std::vector<int> seg(n, 0);
    int idx = prompt_len, k = 1;
    for (int len : response_lens) {
        for (int i = 0; i < len; ++i) seg[idx++] = k;
        ++k;
    }
    std::vector<bool> mask(static_cast<std::size_t>(n) * n, false);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            bool allowed;
            if (seg[i] == 0)
                allowed = (seg[j] == 0 && j <= i);
            else
                allowed = (seg[j] == 0) || (seg[j] == seg[i] && j <= i);
            mask[static_cast<std::size_t>(i) * n + j] = allowed;
        }
    return mask;
}

std::vector<std::vector<double>> extract_response_logprobs(std::span<const double> logprobs,
                                                           const PackedGroup& packed) {
    std::size_t expected = 0;
    for (const auto& s : packed.spans) expected += static_cast<std::size_t>(s.len);
    if (logprobs.size() != expected)
        throw ShapeError("logprob vector of length " + std::to_string(logprobs.size()) +
                         " does not match " + std::to_string(expected) + " response tokens");
    std::vector<std::vector<double>> out;
    out.reserve(packed.spans.size());
    std::size_t cursor = 0;
    for (const auto& s : packed.spans) {
        out.emplace_back(logprobs.begin() + cursor, logprobs.begin() + cursor + s.len);
        cursor += static_cast<std::size_t>(s.len);
    }
    return out;
}

}  // namespace parl

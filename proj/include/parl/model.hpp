#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "parl/errors.hpp"

namespace parl {

using TokenId = std::int32_t;

// Reserved token ids; datasets use ids >= kFirstPayloadToken for payload.
constexpr TokenId kPadToken = 0;
constexpr TokenId kBosToken = 1;
constexpr TokenId kEosToken = 2;
constexpr TokenId kSepToken = 3;
constexpr TokenId kFirstPayloadToken = 4;

// Label value meaning "do not score this position".
constexpr std::int32_t kIgnoreLabel = -1;

struct ModelConfig {
    int vocab_size = 64;
    int d_model = 32;
    int n_layers = 2;
    int n_heads = 2;
    int d_ff = 64;
    int max_seq_len = 256;

    void validate() const;  // throws ConfigError naming the offending field
    bool operator==(const ModelConfig&) const = default;
};

// Attention layout for one forward pass. "causal" is the ordinary
// lower-triangular mask. "shared_prompt" packs several responses after one
// prompt: every token sees the prompt, responses never see each other.
struct AttentionMaskSpec {
    enum class Kind { causal, shared_prompt };

    Kind kind = Kind::causal;
    int prompt_len = 0;                // shared_prompt only
    std::vector<int> response_lens;    // shared_prompt only

    static AttentionMaskSpec causal() { return {}; }
    static AttentionMaskSpec shared_prompt(int prompt_len, std::vector<int> response_lens);

    int total_len() const;
    void validate(int seq_len, int max_seq_len) const;
};

struct TensorInfo {
    std::string name;
    std::size_t offset = 0;  // into the flat parameter array
    int rows = 0;
    int cols = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

class GradBuffer;

// Full weight set of the tiny decoder-only transformer. All tensors live in
// one flat 64-bit float array; layout() names each slice in declaration
// order (the same order the checkpoint format uses).
class ModelParams {
public:
    static ModelParams init(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    std::uint64_t version() const { return version_; }
    std::uint64_t init_seed() const { return init_seed_; }

    std::span<const double> flat() const { return w_; }
    std::span<double> flat_mut() { return w_; }
    const std::vector<TensorInfo>& layout() const { return layout_; }
    std::span<const double> tensor(const std::string& name) const;
    std::uint64_t layout_signature() const { return layout_sig_; }

    // Independent copy, safe to hand to another thread.
    ModelParams clone() const;

    // W <- W - lr * grad_sum / micro_step_count; bumps version.
    // Refuses non-finite gradients (params untouched).
    void apply_update(const GradBuffer& grads, double lr);

    bool all_finite() const;

    // Monotone counter bumped by every cached forward; used to detect stale
    // activation handles. Mutable bookkeeping, not part of the weights.
    std::uint64_t forward_generation() const { return forward_gen_; }
    std::uint64_t bump_forward_generation() const { return ++forward_gen_; }

private:
    ModelParams() = default;
    friend ModelParams load_checkpoint(const std::string& path);

    ModelConfig cfg_;
    std::vector<double> w_;
    std::vector<TensorInfo> layout_;
    std::uint64_t layout_sig_ = 0;
    std::uint64_t version_ = 0;
    std::uint64_t init_seed_ = 0;
    mutable std::uint64_t forward_gen_ = 0;
};

// Flat gradient accumulator, layout-congruent with a ModelParams.
class GradBuffer {
public:
    explicit GradBuffer(const ModelParams& ref)
        : g_(ref.flat().size(), 0.0), layout_sig_(ref.layout_signature()) {}

    void reset() {
        std::fill(g_.begin(), g_.end(), 0.0);
        micro_step_count_ = 0;
    }

    // Elementwise += other; counts add.
    void accumulate(const GradBuffer& other);

    std::span<const double> flat() const { return g_; }
    std::span<double> flat_mut() { return g_; }
    int micro_step_count() const { return micro_step_count_; }
    void set_micro_step_count(int n) { micro_step_count_ = n; }
    void add_micro_steps(int n) { micro_step_count_ += n; }
    std::uint64_t layout_signature() const { return layout_sig_; }
    bool all_finite() const;

private:
    std::vector<double> g_;
    int micro_step_count_ = 0;
    std::uint64_t layout_sig_ = 0;
};

struct ForwardCache;  // activations; defined in model.cpp's private header section below

// Result of one scoring forward. `logprobs[i]` is log pi(labels[p] | context)
// for the i-th position p with a non-ignore label, in position order.
//
// Label convention: labels are self-aligned -- labels[p] is the token whose
// probability is evaluated at position p given everything strictly before p
// in p's logical sequence. The logits used for position p therefore come
// from p's logical predecessor: p-1 under a causal mask, and the last prompt
// position for the first token of each packed response. This is what makes
// packed and unpacked scoring agree exactly.
struct ForwardResult {
    std::vector<double> logprobs;
    std::vector<int> scored_positions;
    std::shared_ptr<ForwardCache> cache;  // null unless want_cache
};

ForwardResult forward_logprobs(const ModelParams& params,
                               std::span<const TokenId> tokens,
                               std::span<const int> positions,
                               const AttentionMaskSpec& mask,
                               std::span<const std::int32_t> labels,
                               bool want_cache = false);

// Gradient of sum_i upstream[i] * logprobs[i] w.r.t. all parameters.
// `fwd` must come from the immediately preceding cached forward on `params`.
GradBuffer backward(const ModelParams& params, const ForwardResult& fwd,
                    std::span<const double> upstream);

// Per-position log-softmax rows over the vocabulary (row t = distribution of
// the token following position t). Used by sampling and by normalization
// tests; row-major [seq_len x vocab].
std::vector<double> forward_logprob_rows(const ModelParams& params,
                                         std::span<const TokenId> tokens,
                                         std::span<const int> positions,
                                         const AttentionMaskSpec& mask);

// Autoregressive sampling with naive recomputation. temperature == 0 is
// argmax with ties broken toward the lowest token id. Stops after emitting
// eos or after max_new_tokens. Deterministic for fixed inputs and seed.
std::vector<TokenId> sample_tokens(const ModelParams& params,
                                   std::span<const TokenId> prompt,
                                   int max_new_tokens, double temperature,
                                   std::uint64_t rng_seed);

// Checkpoint io; binary layout documented in docs/formats.md.
void save_checkpoint(const std::string& path, const ModelParams& params);
ModelParams load_checkpoint(const std::string& path);

}  // namespace parl

#include "parl/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <queue>
#include <string>

#include "parl/rng.hpp"

namespace parl {

void LatencyModel::validate() const {
    if (kind == Kind::per_token_cost) {
        if (prefill_cost < 0.0 || decode_cost < 0.0)
            throw ConfigError("latency costs must be >= 0");
        if (jitter < 0.0 || jitter >= 1.0) throw ConfigError("latency jitter must be in [0, 1)");
    } else {
        if (trace.empty()) throw ConfigError("deterministic_trace latency model needs a trace");
        for (const auto& wave : trace)
            for (double t : wave)
                if (!(t > 0.0)) throw ConfigError("trace durations must be > 0");
    }
}

RolloutService::RolloutService(int n_instances, int max_batch_slots, LatencyModel latency,
                               BatchingMode batching)
    : max_batch_slots_(max_batch_slots), latency_(std::move(latency)), batching_(batching) {
    if (n_instances < 1) throw ConfigError("rollout service needs >= 1 instance");
    if (max_batch_slots < 1) throw ConfigError("rollout instances need >= 1 batch slot");
    latency_.validate();
    instances_.resize(n_instances);
    for (int i = 0; i < n_instances; ++i) instances_[i].id = i;
}

void RolloutService::sync_weights(const ModelParams& params) {
    if (busy_.load())
        throw BarrierError("sync_weights called while generation is in flight");
    for (auto& inst : instances_) inst.params = params.clone();
    for (const auto& inst : instances_)
        if (inst.params->version() != params.version())
            throw BarrierError("instance version check failed after sync");
    synced_ = true;
}

std::uint64_t RolloutService::synced_version(int instance) const {
    const auto& inst = instances_.at(instance);
    if (!inst.params) throw BarrierError("instance has no synced weights");
    return inst.params->version();
}

std::vector<double> RolloutService::score_logprobs(int instance, std::span<const TokenId> prompt,
                                                   std::span<const TokenId> response) const {
    const auto& inst = instances_.at(instance);
    if (!inst.params) throw BarrierError("instance has no synced weights");
    if (response.empty()) return {};
    std::vector<TokenId> tokens(prompt.begin(), prompt.end());
    tokens.insert(tokens.end(), response.begin(), response.end());
    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i);
    std::vector<std::int32_t> labels(tokens.size(), kIgnoreLabel);
    for (std::size_t i = 0; i < response.size(); ++i)
        labels[prompt.size() + i] = response[i];
    return forward_logprobs(*inst.params, tokens, positions, AttentionMaskSpec::causal(), labels)
        .logprobs;
}

namespace {

double request_duration(const LatencyModel& lm, int request_index_on_instance, int slots,
                        std::size_t prompt_len, std::size_t response_len,
                        std::uint64_t request_seed) {
    if (lm.kind == LatencyModel::Kind::deterministic_trace) {
        int wave = request_index_on_instance / slots;
        int slot = request_index_on_instance % slots;
        const auto& row = lm.trace[wave % lm.trace.size()];
        return row[slot % row.size()];
    }
    double base = lm.prefill_cost * static_cast<double>(prompt_len) +
                  lm.decode_cost * static_cast<double>(std::max<std::size_t>(response_len, 1));
    if (lm.jitter > 0.0) {
        // Jitter stream is derived separately from the content stream so the
        // latency model can change without touching sampled tokens.
        Rng jr(mix_seed(request_seed, 0x6a697474ull));  // "jitt"
        base *= 1.0 + lm.jitter * (2.0 * jr.uniform() - 1.0);
    }
    return base;
}

}  // namespace

void RolloutService::submit_prompts(std::span<const RolloutRequest> prompts,
                                    int rollouts_per_group, const GenConfig& gen,
                                    std::uint64_t seed,
                                    const std::function<void(RolloutResult)>& on_result) {
    if (!synced_) throw BarrierError("submit_prompts before sync_weights for this iteration");
    if (rollouts_per_group < 1) throw ConfigError("rollouts_per_group must be >= 1");
    if (gen.temperature < 0.0) throw ConfigError("temperature must be >= 0");
    busy_.store(true);
    struct BusyGuard {
        std::atomic<bool>& b;
        ~BusyGuard() { b.store(false); }
    } guard{busy_};

    // Expand and dispatch round-robin: request k -> instance k mod I.
    struct Pending {
        const RolloutRequest* req;
        int rollout_index;
        std::uint64_t seed;
    };
    const int n_inst = instance_count();
    std::vector<std::vector<Pending>> per_instance(n_inst);
    int k = 0;
    for (const auto& p : prompts) {
        if (p.prompt.empty()) throw ShapeError("empty prompt in rollout request");
        for (int g = 0; g < rollouts_per_group; ++g, ++k) {
            std::uint64_t rseed =
                mix_seed(seed, static_cast<std::uint64_t>(p.prompt_id), static_cast<std::uint64_t>(g));
            per_instance[k % n_inst].push_back({&p, g, rseed});
        }
    }
    last_dispatch_counts_.assign(n_inst, 0);
    for (int i = 0; i < n_inst; ++i)
        last_dispatch_counts_[i] = static_cast<int>(per_instance[i].size());

    // Each instance generates its own assignment; workers are independent, so
    // run them concurrently. Completion times come from the virtual clock.
    auto run_instance = [&](int inst_id) {
        const Instance& inst = instances_[inst_id];
        const auto& work = per_instance[inst_id];
        std::vector<RolloutResult> results;
        results.reserve(work.size());

        // slot free times under continuous batching
        std::priority_queue<std::pair<double, int>, std::vector<std::pair<double, int>>,
                            std::greater<>>
            slots;
        for (int s = 0; s < max_batch_slots_; ++s) slots.push({0.0, s});
        double wave_start = 0.0, wave_max = 0.0;

        for (std::size_t idx = 0; idx < work.size(); ++idx) {
            const auto& w = work[idx];
            RolloutResult r;
            r.prompt_id = w.req->prompt_id;
            r.group_slot = w.req->group_slot;
            r.rollout_index = w.rollout_index;
            r.group_id = w.req->group_id;
            r.prompt = w.req->prompt;
            r.instance_id = inst_id;
            r.response = sample_tokens(*inst.params, r.prompt, gen.max_new_tokens,
                                       gen.temperature, w.seed);
            if (!r.response.empty())
                r.old_logprobs = score_logprobs(inst_id, r.prompt, r.response);

            double dur = request_duration(latency_, static_cast<int>(idx), max_batch_slots_,
                                          r.prompt.size(), r.response.size(), w.seed);
            if (batching_ == BatchingMode::continuous) {
                auto [free_at, slot] = slots.top();
                slots.pop();
                r.completion_time = free_at + dur;
                slots.push({r.completion_time, slot});
            } else {
                int pos_in_wave = static_cast<int>(idx) % max_batch_slots_;
                if (pos_in_wave == 0 && idx > 0) {
                    wave_start = wave_max;  // next wave starts when this one drains
                }
                r.completion_time = wave_start + dur;
                wave_max = std::max(wave_max, r.completion_time);
            }
            results.push_back(std::move(r));
        }
        return results;
    };

    std::vector<std::future<std::vector<RolloutResult>>> futs;
    futs.reserve(n_inst);
    for (int i = 0; i < n_inst; ++i)
        futs.push_back(std::async(std::launch::async, run_instance, i));
    std::vector<RolloutResult> all;
    for (auto& f : futs) {
        auto part = f.get();
        all.insert(all.end(), std::make_move_iterator(part.begin()),
                   std::make_move_iterator(part.end()));
    }
    std::sort(all.begin(), all.end(), [](const RolloutResult& a, const RolloutResult& b) {
        if (a.completion_time != b.completion_time) return a.completion_time < b.completion_time;
        if (a.prompt_id != b.prompt_id) return a.prompt_id < b.prompt_id;
        return a.rollout_index < b.rollout_index;
    });
    synced_ = false;  // the next iteration must sync again
    for (auto& r : all) on_result(std::move(r));
}

std::vector<RolloutResult> RolloutService::submit_prompts_collect(
    std::span<const RolloutRequest> prompts, int rollouts_per_group, const GenConfig& gen,
    std::uint64_t seed) {
    std::vector<RolloutResult> out;
    submit_prompts(prompts, rollouts_per_group, gen, seed,
                   [&](RolloutResult r) { out.push_back(std::move(r)); });
    return out;
}

}  // namespace parl

#include "parl/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <map>
#include <thread>

#include "parl/rng.hpp"

namespace parl {

TriModel TriModel::init(const ModelConfig& config, std::uint64_t seed) {
    ModelParams policy = ModelParams::init(config, seed);
    TriModel tm{policy.clone(), policy.clone(), std::move(policy)};
    return tm;
}

void TriModel::snapshot_old_policy() { old_policy = policy.clone(); }

TriForwardResult trimodel_forward(const TriModel& tm, std::span<const TokenId> tokens,
                                  std::span<const int> positions, const AttentionMaskSpec& mask,
                                  std::span<const std::int32_t> labels) {
    TriForwardResult out;
    out.policy = forward_logprobs(tm.policy, tokens, positions, mask, labels, /*want_cache=*/true);
    out.old_logprobs = forward_logprobs(tm.old_policy, tokens, positions, mask, labels).logprobs;
    out.ref_logprobs = forward_logprobs(tm.reference, tokens, positions, mask, labels).logprobs;
    return out;
}

void PipelineSettings::validate(const ModelConfig& model) const {
    batch.validate();
    if (gen.max_new_tokens < 1) throw ConfigError("gen.max_new_tokens must be >= 1");
    if (gen.temperature < 0.0) throw ConfigError("gen.temperature must be >= 0");
    if (!(hyper.lr > 0.0)) throw ConfigError("hyper.lr must be > 0");
    if (!(hyper.epsilon > 0.0 && hyper.epsilon < 1.0))
        throw ConfigError("hyper.epsilon must be in (0, 1)");
    if (hyper.beta < 0.0) throw ConfigError("hyper.beta must be >= 0");
    if (train_cost_per_microstep < 0.0) throw ConfigError("train_cost_per_microstep must be >= 0");
    if (stall_timeout_ms < 1) throw ConfigError("stall_timeout_ms must be >= 1");
    if (shared_prompt && batch.rollouts_per_group % batch.microbatch_size != 0)
        throw ConfigError("shared_prompt packing needs G divisible by m so every micro-batch "
                          "stays within one group (G = " + std::to_string(batch.rollouts_per_group) +
                          ", m = " + std::to_string(batch.microbatch_size) + ")");
    task.validate(model.vocab_size);
    // Longest packed forward must fit: prompt + (m | 1) * max_new_tokens.
    int prompt_max = (task.kind == TaskKind::arith_mod) ? 4 : 2 + task.prompt_payload_max;
    int frame = shared_prompt ? batch.microbatch_size : 1;
    if (prompt_max + frame * gen.max_new_tokens > model.max_seq_len)
        throw ConfigError("max_seq_len " + std::to_string(model.max_seq_len) +
                          " too small for prompt " + std::to_string(prompt_max) + " + " +
                          std::to_string(frame) + " responses of " +
                          std::to_string(gen.max_new_tokens) + " tokens");
    if (queue_capacity != 0 && queue_capacity < static_cast<std::size_t>(batch.batch_samples()))
        throw ConfigError("queue_capacity below N*G can deadlock the synchronous mode");
}

Pipeline::Pipeline(PipelineSettings settings, TriModel& trimodel, RolloutService& service,
                   Dataloader& dataloader)
    : settings_(std::move(settings)),
      trimodel_(trimodel),
      service_(service),
      dataloader_(dataloader),
      queue_(settings_.queue_capacity ? settings_.queue_capacity
                                      : static_cast<std::size_t>(settings_.batch.batch_samples())) {
    settings_.validate(trimodel_.policy.config());
}

void Pipeline::snapshot_old_policy() {
    if (in_batch_)
        throw BarrierError("snapshot_old_policy called while a batch is being consumed");
    trimodel_.snapshot_old_policy();
}

namespace {

// Self-aligned labels for scoring a response after its prompt.
void causal_scoring_inputs(const Sample& s, std::vector<TokenId>& tokens,
                           std::vector<int>& positions, std::vector<std::int32_t>& labels) {
    tokens.assign(s.prompt.begin(), s.prompt.end());
    tokens.insert(tokens.end(), s.response.begin(), s.response.end());
    positions.resize(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i);
    labels.assign(tokens.size(), kIgnoreLabel);
    for (std::size_t i = 0; i < s.response.size(); ++i)
        labels[s.prompt.size() + i] = s.response[i];
}

}  // namespace

void Pipeline::train_microbatch(std::vector<Sample>& samples, GradBuffer& grads,
                                MicrobatchStats& stats) {
    const auto& hyper = settings_.hyper;
    const bool delayed_old = hyper.old_policy == OldPolicyMode::one_step_delayed;

    if (settings_.shared_prompt) {
        // All samples share one prompt (validated by G % m == 0 and
        // group-contiguous release); one packed tri-model pass covers them.
        for (const auto& s : samples)
            if (s.group_id != samples[0].group_id)
                throw BarrierError("packed micro-batch mixes groups");
        std::vector<std::vector<TokenId>> responses;
        responses.reserve(samples.size());
        for (const auto& s : samples) responses.push_back(s.response);
        PackedGroup packed = pack_group(samples[0].prompt, responses,
                                        trimodel_.policy.config().max_seq_len);

        TriForwardResult tri;
        if (delayed_old) {
            tri = trimodel_forward(trimodel_, packed.tokens, packed.positions, packed.mask,
                                   packed.labels);
        } else {
            tri.policy = forward_logprobs(trimodel_.policy, packed.tokens, packed.positions,
                                          packed.mask, packed.labels, true);
            tri.ref_logprobs = forward_logprobs(trimodel_.reference, packed.tokens,
                                                packed.positions, packed.mask, packed.labels)
                                   .logprobs;
        }
        auto policy_lp = extract_response_logprobs(tri.policy.logprobs, packed);
        auto ref_lp = extract_response_logprobs(tri.ref_logprobs, packed);
        std::vector<std::vector<double>> old_lp;
        if (delayed_old) old_lp = extract_response_logprobs(tri.old_logprobs, packed);

        std::vector<double> upstream;
        upstream.reserve(tri.policy.logprobs.size());
        for (std::size_t j = 0; j < samples.size(); ++j) {
            Sample& s = samples[j];
            if (delayed_old) s.old_logprobs = old_lp[j];
            s.ref_logprobs = ref_lp[j];
            SampleTerms st = per_sample_terms(s, policy_lp[j], hyper.epsilon, hyper.beta,
                                              hyper.granularity);
            stats.objective_sum += st.clip_term - hyper.beta * st.kl;
            stats.clip_sum += st.clip_term;
            stats.kl_sum += st.kl;
            stats.clipped_units += st.clipped_units;
            stats.total_units += st.total_units;
            for (double u : st.upstream) upstream.push_back(-u);
        }
        GradBuffer gb = backward(trimodel_.policy, tri.policy, upstream);
        grads.accumulate(gb);
    } else {
        std::vector<TokenId> tokens;
        std::vector<int> positions;
        std::vector<std::int32_t> labels;
        for (Sample& s : samples) {
            causal_scoring_inputs(s, tokens, positions, labels);
            AttentionMaskSpec mask = AttentionMaskSpec::causal();
            ForwardResult policy_fwd =
                forward_logprobs(trimodel_.policy, tokens, positions, mask, labels, true);
            if (delayed_old)
                s.old_logprobs =
                    forward_logprobs(trimodel_.old_policy, tokens, positions, mask, labels)
                        .logprobs;
            s.ref_logprobs =
                forward_logprobs(trimodel_.reference, tokens, positions, mask, labels).logprobs;

            SampleTerms st = per_sample_terms(s, policy_fwd.logprobs, hyper.epsilon, hyper.beta,
                                              hyper.granularity);
            stats.objective_sum += st.clip_term - hyper.beta * st.kl;
            stats.clip_sum += st.clip_term;
            stats.kl_sum += st.kl;
            stats.clipped_units += st.clipped_units;
            stats.total_units += st.total_units;
            std::vector<double> upstream(st.upstream.size());
            for (std::size_t t = 0; t < st.upstream.size(); ++t) upstream[t] = -st.upstream[t];
            GradBuffer gb = backward(trimodel_.policy, policy_fwd, upstream);
            grads.accumulate(gb);
        }
    }
    ++stats.micro_batches;
}

IterationReport Pipeline::run_iteration(RunMode mode, long step) {
    const BatchSpec& bs = settings_.batch;
    const int n_prompts = bs.prompts_per_batch;
    const int g = bs.rollouts_per_group;
    const int m = bs.microbatch_size;
    const long total = bs.batch_samples();

    if (!queue_.empty()) throw BarrierError("queue not empty at iteration start");
    if (!service_.idle()) throw BarrierError("rollout service busy at iteration start");
    queue_.reset_stats();

    // Line 3: synchronize policy weights to the rollout workers.
    service_.sync_weights(trimodel_.policy);

    // Line 4: retrieve prompts.
    std::vector<int> batch_indices = dataloader_.next_batch_indices();
    std::vector<RolloutRequest> requests(n_prompts);
    std::vector<const TaskItem*> items(n_prompts);
    for (int s = 0; s < n_prompts; ++s) {
        const TaskItem& item = dataloader_.item(batch_indices[s]);
        items[s] = &item;
        requests[s].prompt_id = step * n_prompts + s;
        requests[s].group_slot = s;
        requests[s].group_id = step * n_prompts + s;
        requests[s].prompt = item.prompt;
    }
    const std::uint64_t submit_seed = mix_seed(settings_.run_seed, static_cast<std::uint64_t>(step),
                                               0x726f6c6cull);  // "roll"

    // Producer: dispatch, score rewards inside the rollout callback, compute
    // group advantages once a group is complete, then enqueue the group's
    // samples in rollout order carrying the group completion time.
    std::exception_ptr producer_error;
    std::atomic<bool> producer_done{false};
    auto produce = [&]() {
        struct DoneGuard {
            std::atomic<bool>& flag;
            ~DoneGuard() { flag.store(true); }
        } guard{producer_done};
        try {
            std::vector<std::vector<RolloutResult>> staging(n_prompts);
            int groups_done = 0;
            service_.submit_prompts(requests, g, settings_.gen, submit_seed,
                                    [&](RolloutResult r) {
                int slot = r.group_slot;
                staging[slot].push_back(std::move(r));
                if (static_cast<int>(staging[slot].size()) < g) return;

                auto& group = staging[slot];
                std::sort(group.begin(), group.end(),
                          [](const RolloutResult& a, const RolloutResult& b) {
                              return a.rollout_index < b.rollout_index;
                          });
                double group_done = 0.0;
                for (const auto& rr : group) group_done = std::max(group_done, rr.completion_time);
                std::vector<double> rewards(g);
                for (int i = 0; i < g; ++i)
                    rewards[i] = reward_score(settings_.task.reward, settings_.task,
                                              items[slot]->target, group[i].response);
                std::vector<double> adv = settings_.hyper.advantage_mean_only
                                              ? group_advantages_mean_only(rewards)
                                              : group_advantages(rewards);
                ++groups_done;
                if (settings_.test_drop_groups > 0 &&
                    groups_done > n_prompts - settings_.test_drop_groups)
                    return;  // fault injection: swallow the group
                for (int i = 0; i < g; ++i) {
                    Sample sample;
                    sample.prompt_id = group[i].prompt_id;
                    sample.group_slot = slot;
                    sample.rollout_index = group[i].rollout_index;
                    sample.group_id = group[i].group_id;
                    sample.prompt = std::move(group[i].prompt);
                    sample.response = std::move(group[i].response);
                    sample.reward = rewards[i];
                    sample.advantage = adv[i];
                    sample.old_logprobs = std::move(group[i].old_logprobs);
                    sample.completion_time = group_done;
                    queue_.push(std::move(sample));
                }
            });
        } catch (...) {
            producer_error = std::current_exception();
        }
    };
    std::thread producer(produce);

    if (mode == RunMode::sync) producer.join();  // trainer waits for the full batch

    // Consumer (lines 13-19): dequeue, form micro-batches, accumulate O.
    GradBuffer grad_acc(trimodel_.policy);
    MicrobatchStats stats;
    in_batch_ = true;
    // Synchronous consumption is always canonical (group-major by prompt
    // index); async follows the configured accumulation mode.
    const bool canonical = mode == RunMode::sync ||
                           settings_.hyper.accumulation == AccumulationMode::canonical;
    std::vector<Sample> all_samples;
    all_samples.reserve(total);
    std::vector<Sample> pending;                 // arrival-mode micro-batch
    std::map<std::pair<int, int>, Sample> staged;  // canonical-mode reorder buffer
    int next_canonical = 0;
    std::vector<double> micro_ready;  // virtual release time per trained micro-batch
    double pending_ready = 0.0;
    double t_first_sample = -1.0;
    long consumed = 0;

    auto release_canonical = [&]() {
        while (true) {
            std::vector<Sample> batch;
            double ready = 0.0;
            for (int i = 0; i < m; ++i) {
                int idx = next_canonical + i;
                auto it = staged.find({idx / g, idx % g});
                if (it == staged.end()) return;
            }
            for (int i = 0; i < m; ++i) {
                int idx = next_canonical + i;
                auto it = staged.find({idx / g, idx % g});
                ready = std::max(ready, it->second.completion_time);
                batch.push_back(std::move(it->second));
                staged.erase(it);
            }
            next_canonical += m;
            micro_ready.push_back(ready);
            train_microbatch(batch, grad_acc, stats);
            for (auto& s : batch) all_samples.push_back(std::move(s));
        }
    };

    try {
        while (consumed < total) {
            auto popped = queue_.pop_for(std::chrono::milliseconds(settings_.stall_timeout_ms));
            if (!popped) {
                if (producer_error) std::rethrow_exception(producer_error);
                throw StallError("pipeline stalled: consumed " + std::to_string(consumed) +
                                 " of " + std::to_string(total) + " samples, queue depth " +
                                 std::to_string(queue_.size()) + ", producer " +
                                 (producer.joinable() ? "running" : "finished"));
            }
            Sample s = std::move(*popped);
            ++consumed;
            if (t_first_sample < 0.0) t_first_sample = s.completion_time;
            if (canonical) {
                staged.emplace(std::make_pair(s.group_slot, s.rollout_index), std::move(s));
                release_canonical();
            } else {
                pending_ready = std::max(pending_ready, s.completion_time);
                pending.push_back(std::move(s));
                if (static_cast<int>(pending.size()) == m) {
                    micro_ready.push_back(pending_ready);
                    train_microbatch(pending, grad_acc, stats);
                    for (auto& ps : pending) all_samples.push_back(std::move(ps));
                    pending.clear();
                    pending_ready = 0.0;
                }
            }
        }
    } catch (...) {
        in_batch_ = false;
        // unblock a producer stuck on a full queue, then join
        while (!producer_done.load()) queue_.pop_for(std::chrono::milliseconds(1));
        while (queue_.pop_for(std::chrono::milliseconds(0))) {
        }
        if (producer.joinable()) producer.join();
        throw;
    }
    if (producer.joinable()) producer.join();
    if (producer_error) std::rethrow_exception(producer_error);
    if (!queue_.empty()) throw BarrierError("queue not drained at iteration end");
    in_batch_ = false;

    // Lines 20-21: snapshot, then apply the averaged accumulator. O holds one
    // unscaled per-sample gradient per consumed sample, so the divisor is NG
    // regardless of the micro-batch partition (same arithmetic as averaging
    // micro-batch means of means).
    grad_acc.set_micro_step_count(static_cast<int>(total));
    snapshot_old_policy();
    trimodel_.policy.apply_update(grad_acc, settings_.hyper.lr);

    IterationReport rep;
    rep.step = step;
    rep.samples_consumed = consumed;
    double rmin = all_samples[0].reward, rmax = rmin, rsum = 0.0;
    long tokens = 0;
    for (const auto& s : all_samples) {
        rmin = std::min(rmin, s.reward);
        rmax = std::max(rmax, s.reward);
        rsum += s.reward;
        tokens += static_cast<long>(s.response.size());
    }
    rep.reward_mean = rsum / static_cast<double>(all_samples.size());
    rep.reward_min = rmin;
    rep.reward_max = rmax;
    rep.tokens_trained = tokens;
    rep.loss = stats.objective_sum / static_cast<double>(total);
    rep.kl_mean = stats.kl_sum / static_cast<double>(total);
    rep.clip_fraction =
        stats.total_units > 0 ? static_cast<double>(stats.clipped_units) / stats.total_units : 0.0;
    rep.queue_max_depth = static_cast<long>(queue_.max_depth());

    // Virtual-clock accounting: in sync mode training starts when every
    // rollout has finished; in async mode each micro-step starts when its
    // samples are ready and the trainer is free.
    double all_done = 0.0;
    for (const auto& s : all_samples) all_done = std::max(all_done, s.completion_time);
    double end = 0.0;
    if (mode == RunMode::sync) {
        rep.t_first_sample = all_done;
        end = all_done + static_cast<double>(stats.micro_batches) * settings_.train_cost_per_microstep;
    } else {
        rep.t_first_sample = t_first_sample;
        for (double ready : micro_ready)
            end = std::max(end, ready) + settings_.train_cost_per_microstep;
    }
    rep.t_iteration = end;
    return rep;
}

}  // namespace parl

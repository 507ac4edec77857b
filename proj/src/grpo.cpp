#include "parl/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace parl {

void BatchSpec::validate() const {
    if (prompts_per_batch < 1) throw ConfigError("prompts_per_batch must be >= 1");
    if (rollouts_per_group < 2)
        throw ConfigError("rollouts_per_group must be >= 2 (group advantages need G >= 2)");
    if (microbatch_size < 1) throw ConfigError("microbatch_size must be >= 1");
    int total = batch_samples();
    if (total % microbatch_size != 0) {
        std::string valid;
        for (int m = 1; m <= total; ++m)
            if (total % m == 0) valid += (valid.empty() ? "" : ", ") + std::to_string(m);
        throw ConfigError("N*G = " + std::to_string(total) + " not divisible by m = " +
                          std::to_string(microbatch_size) + "; valid m values: " + valid);
    }
}

std::vector<double> group_advantages(std::span<const double> rewards) {
    if (rewards.size() < 2) throw ConfigError("group_advantages needs G >= 2 rewards");
    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= n;  // population variance
    double std_dev = std::sqrt(var);
    std::vector<double> a(rewards.size(), 0.0);
    if (std_dev < 1e-8) return a;
    for (std::size_t i = 0; i < rewards.size(); ++i) a[i] = (rewards[i] - mean) / std_dev;
    return a;
}

std::vector<double> group_advantages_mean_only(std::span<const double> rewards) {
    if (rewards.size() < 2) throw ConfigError("group_advantages needs G >= 2 rewards");
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= static_cast<double>(rewards.size());
    std::vector<double> a(rewards.size());
    for (std::size_t i = 0; i < rewards.size(); ++i) a[i] = rewards[i] - mean;
    return a;
}

namespace {

void require_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + " is not finite");
}

// Value and d/d(logp_new) of the clipped advantage term. The ratio is formed
// in log space before exponentiation.
struct ClipEval {
    double value;
    double grad;
    bool clipped;  // ratio outside [1-eps, 1+eps]
};

ClipEval eval_clip(double logp_new, double logp_old, double advantage, double epsilon) {
    double r = std::exp(logp_new - logp_old);
    double lo = 1.0 - epsilon, hi = 1.0 + epsilon;
    double clamped = std::min(std::max(r, lo), hi);
    double unclipped = r * advantage;
    double clipped_v = clamped * advantage;
    ClipEval e;
    e.clipped = (r < lo || r > hi);
    if (unclipped <= clipped_v) {
        e.value = unclipped;
        e.grad = r * advantage;  // d(r*A)/d logp_new = r*A
    } else {
        e.value = clipped_v;
        e.grad = (r > lo && r < hi) ? r * advantage : 0.0;
    }
    return e;
}

// kl = exp(d) - d - 1 with d = logp_ref - logp_new, computed via expm1 so the
// result stays >= 0 even for tiny d. d(kl)/d(logp_new) = -expm1(d).
struct KlEval {
    double value;
    double grad;
};

KlEval eval_kl(double logp_new, double logp_ref) {
    double d = logp_ref - logp_new;
    double e = std::expm1(d);
    return {e - d, -e};
}

}  // namespace

double clipped_term(double logp_new, double logp_old, double advantage, double epsilon) {
    require_finite(logp_new, "logp_new");
    require_finite(logp_old, "logp_old");
    require_finite(advantage, "advantage");
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("epsilon must be in (0, 1)");
    return eval_clip(logp_new, logp_old, advantage, epsilon).value;
}

double kl_term(double logp_new, double logp_ref) {
    require_finite(logp_new, "logp_new");
    require_finite(logp_ref, "logp_ref");
    return eval_kl(logp_new, logp_ref).value;
}

SampleTerms per_sample_terms(const Sample& sample, std::span<const double> policy_logprobs,
                             double epsilon, double beta, LossGranularity granularity) {
    const std::size_t T = sample.response.size();
    if (policy_logprobs.size() != T || sample.old_logprobs.size() != T ||
        sample.ref_logprobs.size() != T)
        throw ShapeError("logprob vectors not aligned with response length " + std::to_string(T));
    if (T == 0) throw ShapeError("sample has empty response");
    require_finite(sample.advantage, "advantage");

    SampleTerms st;
    st.upstream.assign(T, 0.0);
    if (granularity == LossGranularity::token) {
        const double inv_t = 1.0 / static_cast<double>(T);
        for (std::size_t t = 0; t < T; ++t) {
            ClipEval ce = eval_clip(policy_logprobs[t], sample.old_logprobs[t],
                                    sample.advantage, epsilon);
            KlEval ke = eval_kl(policy_logprobs[t], sample.ref_logprobs[t]);
            st.clip_term += inv_t * ce.value;
            st.kl += inv_t * ke.value;
            st.upstream[t] = inv_t * (ce.grad - beta * ke.grad);
            if (ce.clipped) ++st.clipped_units;
        }
        st.total_units = static_cast<int>(T);
    } else {
        double s_new = 0.0, s_old = 0.0, s_ref = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
            s_new += policy_logprobs[t];
            s_old += sample.old_logprobs[t];
            s_ref += sample.ref_logprobs[t];
        }
        ClipEval ce = eval_clip(s_new, s_old, sample.advantage, epsilon);
        KlEval ke = eval_kl(s_new, s_ref);
        st.clip_term = ce.value;
        st.kl = ke.value;
        double g = ce.grad - beta * ke.grad;
        for (std::size_t t = 0; t < T; ++t) st.upstream[t] = g;
        st.clipped_units = ce.clipped ? 1 : 0;
        st.total_units = 1;
    }
    return st;
}

MicrobatchLoss grpo_microbatch_loss(std::span<const Sample> samples,
                                    const std::vector<std::vector<double>>& policy_logprobs,
                                    double epsilon, double beta, LossGranularity granularity) {
    if (samples.empty()) throw ShapeError("empty micro-batch");
    if (policy_logprobs.size() != samples.size())
        throw ShapeError("policy logprob count != sample count");
    const double inv_m = 1.0 / static_cast<double>(samples.size());

    MicrobatchLoss out;
    out.upstream.resize(samples.size());
    double sum_obj = 0.0, sum_clip = 0.0, sum_kl = 0.0;
    long clipped = 0, units = 0;
    for (std::size_t j = 0; j < samples.size(); ++j) {
        SampleTerms st = per_sample_terms(samples[j], policy_logprobs[j], epsilon, beta,
                                          granularity);
        sum_obj += st.clip_term - beta * st.kl;
        sum_clip += st.clip_term;
        sum_kl += st.kl;
        clipped += st.clipped_units;
        units += st.total_units;
        out.report.token_count += static_cast<long>(samples[j].response.size());
        out.upstream[j].resize(st.upstream.size());
        for (std::size_t t = 0; t < st.upstream.size(); ++t)
            out.upstream[j][t] = -inv_m * st.upstream[t];
    }
    out.loss = -inv_m * sum_obj;
    out.report.objective = inv_m * sum_obj;
    out.report.clip_term_mean = inv_m * sum_clip;
    out.report.kl_mean = inv_m * sum_kl;
    out.report.clip_fraction = units > 0 ? static_cast<double>(clipped) / units : 0.0;
    return out;
}

std::vector<std::vector<Sample>> split_microbatches(std::vector<Sample> batch, int m,
                                                    SplitPolicy policy) {
    if (m < 1) throw ConfigError("microbatch size must be >= 1");
    const int total = static_cast<int>(batch.size());
    if (total % m != 0) {
        std::string valid;
        for (int k = 1; k <= total; ++k)
            if (total % k == 0) valid += (valid.empty() ? "" : ", ") + std::to_string(k);
        throw ConfigError("batch of " + std::to_string(total) + " samples not divisible by m = " +
                          std::to_string(m) + "; valid m values: " + valid);
    }
    if (policy == SplitPolicy::group_major) {
        std::stable_sort(batch.begin(), batch.end(), [](const Sample& a, const Sample& b) {
            if (a.group_id != b.group_id) return a.group_id < b.group_id;
            return a.rollout_index < b.rollout_index;
        });
    }
    std::vector<std::vector<Sample>> out;
    out.reserve(total / m);
    for (int i = 0; i < total; i += m)
        out.emplace_back(batch.begin() + i, batch.begin() + i + m);
    return out;
}

}  // namespace parl

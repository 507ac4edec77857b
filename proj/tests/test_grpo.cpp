#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "parl/grpo.hpp"
#include "parl/rng.hpp"

using namespace parl;

namespace {

Sample make_sample(int group, int rollout, std::vector<double> old_lp, std::vector<double> ref_lp,
                   double advantage) {
    Sample s;
    s.group_id = group;
    s.group_slot = group;
    s.rollout_index = rollout;
    s.prompt = {1, 5, 3};
    s.response.assign(old_lp.size(), 6);
    s.old_logprobs = std::move(old_lp);
    s.ref_logprobs = std::move(ref_lp);
    s.advantage = advantage;
    return s;
}

}  // namespace

TEST_CASE("group advantages: hand oracle, zero variance, centering") {
    std::vector<double> r{1.0, 0.0, 0.0, 1.0};  // mean 0.5, population std 0.5
    auto a = group_advantages(r);
    REQUIRE(a.size() == 4);
    CHECK(a[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(a[1] == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(a[2] == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(a[3] == doctest::Approx(1.0).epsilon(1e-12));

    std::vector<double> flat{1.0, 1.0, 1.0, 1.0};
    for (double v : group_advantages(flat)) CHECK(v == 0.0);

    std::vector<double> one{0.5};
    CHECK_THROWS_AS(group_advantages(one), ConfigError);

    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> rewards(2 + trial % 7);
        for (auto& v : rewards) v = rng.uniform() * 3.0 - 1.0;
        auto adv = group_advantages(rewards);
        double sum = 0.0;
        for (double v : adv) sum += v;
        CHECK(std::fabs(sum) < 1e-12);

        // invariant to a constant shift of all rewards
        std::vector<double> shifted = rewards;
        for (auto& v : shifted) v += 17.25;
        auto adv2 = group_advantages(shifted);
        for (std::size_t i = 0; i < adv.size(); ++i)
            CHECK(std::fabs(adv[i] - adv2[i]) < 1e-12);
    }
}

TEST_CASE("clipped term: direct evaluations") {
    // r = 1.5, A = 1, eps = 0.2 -> upper clip active
    CHECK(clipped_term(std::log(1.5), 0.0, 1.0, 0.2) == doctest::Approx(1.2).epsilon(1e-12));
    // r = 0.5, A = -1 -> min picks the clipped branch
    CHECK(clipped_term(std::log(0.5), 0.0, -1.0, 0.2) == doctest::Approx(-0.8).epsilon(1e-12));
    // identity ratio returns A
    for (double adv : {-2.0, 0.0, 0.7}) {
        CHECK(clipped_term(-1.3, -1.3, adv, 0.2) == doctest::Approx(adv).epsilon(1e-12));
        CHECK(clipped_term(-1.3, -1.3, adv, 0.05) == doctest::Approx(adv).epsilon(1e-12));
    }
    CHECK_THROWS_AS(clipped_term(0.0, 0.0, 1.0, 1.5), ConfigError);
    CHECK_THROWS_AS(clipped_term(std::nan(""), 0.0, 1.0, 0.2), NumericError);

    // |clipped| <= max(|r*A|, (1+eps)|A|)
    Rng rng(7);
    for (int i = 0; i < 2000; ++i) {
        double lp_new = -3.0 * rng.uniform(), lp_old = -3.0 * rng.uniform();
        double a = 4.0 * rng.uniform() - 2.0, eps = 0.05 + 0.9 * rng.uniform();
        double r = std::exp(lp_new - lp_old);
        double v = clipped_term(lp_new, lp_old, a, eps);
        CHECK(std::fabs(v) <=
              std::max(std::fabs(r * a), (1.0 + eps) * std::fabs(a)) + 1e-12);
    }
}

TEST_CASE("kl term: zero at equality, scalar oracle, nonnegative") {
    CHECK(kl_term(-1.7, -1.7) == 0.0);
    // rho = 2: 2 - ln 2 - 1
    double expect = 2.0 - std::log(2.0) - 1.0;
    CHECK(kl_term(-2.0, -2.0 + std::log(2.0)) == doctest::Approx(expect).epsilon(1e-12));

    Rng rng(11);
    for (int i = 0; i < 10000; ++i) {
        double lp_new = -8.0 * rng.uniform();
        double lp_ref = -8.0 * rng.uniform();
        CHECK(kl_term(lp_new, lp_ref) >= 0.0);
    }
}

TEST_CASE("microbatch loss: identity-weights case and vanishing terms") {
    std::vector<Sample> samples;
    std::vector<std::vector<double>> lp;
    std::vector<double> advantages{1.0, -0.5, 0.25, 2.0};
    for (int j = 0; j < 4; ++j) {
        std::vector<double> v{-1.0 - j, -0.5, -2.0 + 0.3 * j};
        samples.push_back(make_sample(0, j, v, v, advantages[j]));
        lp.push_back(v);
    }
    // policy == old == ref: ratio 1, kl 0 -> loss = -(1/m) sum A_j
    auto ml = grpo_microbatch_loss(samples, lp, 0.2, 0.04, LossGranularity::token);
    double expect = -(1.0 - 0.5 + 0.25 + 2.0) / 4.0;
    CHECK(ml.loss == doctest::Approx(expect).epsilon(1e-12));
    CHECK(ml.report.clip_fraction == 0.0);
    CHECK(ml.report.kl_mean == 0.0);
    CHECK(ml.report.token_count == 12);
    CHECK(ml.report.objective ==
          doctest::Approx(ml.report.clip_term_mean - 0.04 * ml.report.kl_mean).epsilon(1e-12));

    // beta = 0 and all advantages 0 -> loss = 0
    for (auto& s : samples) s.advantage = 0.0;
    auto ml0 = grpo_microbatch_loss(samples, lp, 0.2, 0.0, LossGranularity::token);
    CHECK(ml0.loss == 0.0);

    // sequence granularity agrees on the identity case
    for (std::size_t j = 0; j < samples.size(); ++j) samples[j].advantage = advantages[j];
    auto mls = grpo_microbatch_loss(samples, lp, 0.2, 0.04, LossGranularity::sequence);
    CHECK(mls.loss == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("microbatch loss upstream matches finite differences in both granularities") {
    // Ratios stay inside the clip band so the loss is smooth; the clipped
    // branch derivative is checked exactly in the next test case.
    Rng rng(31);
    const double off_old[4] = {0.02, -0.03, 0.015, -0.025};
    const double off_ref[4] = {-0.02, 0.01, 0.03, -0.015};
    for (LossGranularity gran : {LossGranularity::token, LossGranularity::sequence}) {
        std::vector<Sample> samples;
        std::vector<std::vector<double>> lp;
        for (int j = 0; j < 3; ++j) {
            int len = 2 + j;
            std::vector<double> pol(len), old(len), ref(len);
            for (int t = 0; t < len; ++t) {
                pol[t] = -2.5 * rng.uniform() - 0.1;
                old[t] = pol[t] - off_old[(t + j) % 4];
                ref[t] = pol[t] + off_ref[(t + 2 * j) % 4];
            }
            samples.push_back(make_sample(0, j, old, ref, j == 0 ? 1.4 : (j == 1 ? -0.9 : 0.6)));
            lp.push_back(pol);
        }
        auto ml = grpo_microbatch_loss(samples, lp, 0.2, 0.04, gran);
        auto loss_at = [&](std::size_t j, std::size_t t, double delta) {
            auto bumped = lp;
            bumped[j][t] += delta;
            return grpo_microbatch_loss(samples, bumped, 0.2, 0.04, gran).loss;
        };
        const double h = 1e-3;  // fourth-order stencil
        for (std::size_t j = 0; j < lp.size(); ++j)
            for (std::size_t t = 0; t < lp[j].size(); ++t) {
                double fd = (8.0 * (loss_at(j, t, h) - loss_at(j, t, -h)) -
                             (loss_at(j, t, 2 * h) - loss_at(j, t, -2 * h))) /
                            (12.0 * h);
                double denom = std::max({std::fabs(fd), std::fabs(ml.upstream[j][t]), 1e-3});
                CHECK(std::fabs(fd - ml.upstream[j][t]) / denom < 1e-8);
            }
    }
}

TEST_CASE("clipped-branch upstream equals the closed form") {
    const double eps = 0.2, beta = 0.04;
    // r = 1.5 with A > 0: min picks the clipped branch, clip derivative 0
    {
        std::vector<double> pol{-1.0};
        Sample s = make_sample(0, 0, {pol[0] - std::log(1.5)}, {pol[0] + 0.1}, 1.0);
        auto ml = grpo_microbatch_loss(std::vector<Sample>{s}, {pol}, eps, beta,
                                       LossGranularity::token);
        double kl_grad = -std::expm1(0.1);  // d(kl)/d(lp_new)
        double expect = -(0.0 - beta * kl_grad);
        CHECK(ml.upstream[0][0] == doctest::Approx(expect).epsilon(1e-15));
        CHECK(ml.report.clip_fraction == 1.0);
    }
    // r = 0.5 with A < 0: min picks the clipped branch as well
    {
        std::vector<double> pol{-1.0};
        Sample s = make_sample(0, 0, {pol[0] - std::log(0.5)}, {pol[0] - 0.2}, -1.0);
        auto ml = grpo_microbatch_loss(std::vector<Sample>{s}, {pol}, eps, beta,
                                       LossGranularity::token);
        double kl_grad = -std::expm1(-0.2);
        double expect = -(0.0 - beta * kl_grad);
        CHECK(ml.upstream[0][0] == doctest::Approx(expect).epsilon(1e-15));
    }
    // r = 1.5 with A < 0: unclipped branch wins the min, derivative r*A
    {
        std::vector<double> pol{-1.0};
        Sample s = make_sample(0, 0, {pol[0] - std::log(1.5)}, {pol[0]}, -1.0);
        auto ml = grpo_microbatch_loss(std::vector<Sample>{s}, {pol}, eps, beta,
                                       LossGranularity::token);
        double expect = -(1.5 * -1.0 - 0.0);
        CHECK(ml.upstream[0][0] == doctest::Approx(expect).epsilon(1e-12));
        CHECK(ml.report.clip_fraction == 1.0);  // ratio is outside the band either way
    }
}

TEST_CASE("split_microbatches: partition, ordering policies, errors") {
    std::vector<Sample> batch;
    // two groups of four, arrival order interleaves the groups
    for (int i = 0; i < 8; ++i) {
        Sample s;
        s.group_id = i % 2;
        s.rollout_index = i / 2;
        s.prompt_id = i;
        s.response = {static_cast<TokenId>(4 + i)};
        s.old_logprobs = {0.0};
        s.ref_logprobs = {0.0};
        batch.push_back(s);
    }

    auto mb = split_microbatches(batch, 2, SplitPolicy::group_major);
    REQUIRE(mb.size() == 4);
    for (const auto& micro : mb) {
        REQUIRE(micro.size() == 2);
        CHECK(micro[0].group_id == micro[1].group_id);
    }

    auto whole = split_microbatches(batch, 8, SplitPolicy::arrival_order);
    REQUIRE(whole.size() == 1);
    for (int i = 0; i < 8; ++i) CHECK(whole[0][i].prompt_id == i);

    // any split is a permutation of the batch
    for (int m : {1, 2, 4, 8}) {
        for (auto policy : {SplitPolicy::arrival_order, SplitPolicy::group_major}) {
            auto split = split_microbatches(batch, m, policy);
            std::vector<std::int64_t> ids;
            for (const auto& micro : split)
                for (const auto& s : micro) ids.push_back(s.prompt_id);
            std::sort(ids.begin(), ids.end());
            for (int i = 0; i < 8; ++i) CHECK(ids[i] == i);
        }
    }

    CHECK_THROWS_WITH_AS(split_microbatches(batch, 3, SplitPolicy::arrival_order),
                         doctest::Contains("valid m values"), ConfigError);
    BatchSpec bs{2, 4, 3};
    CHECK_THROWS_AS(bs.validate(), ConfigError);
}

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "parl/event_sim.hpp"
#include "parl/rng.hpp"

using namespace parl;

namespace {

LatencyTrace random_trace(Rng& rng, int waves, int slots, double lo = 0.2, double hi = 3.0) {
    LatencyTrace t;
    t.batches.assign(waves, std::vector<double>(slots));
    for (auto& wave : t.batches)
        for (double& d : wave) d = lo + (hi - lo) * rng.uniform();
    return t;
}

}  // namespace

TEST_CASE("startup formulas on hand traces") {
    LatencyTrace t{{{3.0, 5.0}, {2.0, 4.0}}};
    CHECK(t_sync(t) == 9.0);   // 5 + 4
    CHECK(t_async(t) == 3.0);  // min{3, 5}

    LatencyTrace single{{{7.0}}};
    CHECK(t_sync(single) == 7.0);
    CHECK(t_async(single) == 7.0);

    LatencyTrace empty;
    CHECK_THROWS_AS(t_sync(empty), ShapeError);
    CHECK_THROWS_AS(t_async(empty), ShapeError);
}

TEST_CASE("t_sync equals the direct formula and t_async <= t_sync on random traces") {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        auto t = random_trace(rng, rng.uniform_int(1, 6), rng.uniform_int(1, 8));
        double sum_max = 0.0;
        for (const auto& wave : t.batches) {
            double mx = wave[0];
            for (double d : wave) mx = std::max(mx, d);
            sum_max += mx;
        }
        CHECK(t_sync(t) == sum_max);
        CHECK(t_async(t) <= t_sync(t));
    }
}

TEST_CASE("simulator startup times in wave mode equal the formulas exactly") {
    Rng rng(23);
    for (int trial = 0; trial < 100; ++trial) {
        auto t = random_trace(rng, rng.uniform_int(1, 5), rng.uniform_int(1, 6));
        for (SimMode mode : {SimMode::sync, SimMode::async}) {
            SimReport r = simulate_iteration(mode, t, 0.3, 1, 0.5, InferenceModel::wave);
            CHECK(r.t_sync_startup == t_sync(t));
            CHECK(r.t_async_startup == t_async(t));
        }
    }
}

TEST_CASE("degenerate limits of simulate_iteration") {
    Rng rng(31);
    auto t = random_trace(rng, 3, 4);
    double last = 0.0;
    {
        SimReport r = simulate_iteration(SimMode::async, t, 0.0, 2, 0.25, InferenceModel::wave);
        // trainer free: async makespan = sync_cost + last completion
        last = r.t_sync_startup;
        CHECK(r.makespan == doctest::Approx(0.25 + last).epsilon(1e-15));
    }
    {
        // near-instant inference: both modes converge to sync_cost + M*train_cost
        LatencyTrace eps_trace;
        eps_trace.batches.assign(2, std::vector<double>(4, 1e-9));
        SimReport a = simulate_iteration(SimMode::async, eps_trace, 0.5, 2, 1.0);
        SimReport s = simulate_iteration(SimMode::sync, eps_trace, 0.5, 2, 1.0);
        CHECK(a.makespan == doctest::Approx(1.0 + 4 * 0.5).epsilon(1e-6));
        CHECK(s.makespan == doctest::Approx(1.0 + 4 * 0.5).epsilon(1e-6));
    }
    CHECK_THROWS_AS(simulate_iteration(SimMode::sync, t, 0.1, 5, 0.0), ConfigError);
}

TEST_CASE("async never loses to sync and beats it on balanced workloads") {
    Rng rng(47);
    for (int trial = 0; trial < 50; ++trial) {
        auto t = random_trace(rng, rng.uniform_int(2, 6), rng.uniform_int(2, 8));
        int total = t.total_prompts();
        int m = 1;
        double cost = t_sync(t) / total;  // balanced: total training == t_sync
        SimReport a = simulate_iteration(SimMode::async, t, cost, m, 0.0);
        SimReport s = simulate_iteration(SimMode::sync, t, cost, m, 0.0);
        CHECK(a.makespan <= s.makespan + 1e-12);
    }
}

TEST_CASE("work conservation and determinism") {
    Rng rng(61);
    auto t = random_trace(rng, 4, 6);
    SimReport a1 = simulate_iteration(SimMode::async, t, 0.21, 2, 0.4);
    SimReport a2 = simulate_iteration(SimMode::async, t, 0.21, 2, 0.4);
    CHECK(a1.makespan == a2.makespan);
    CHECK(a1.trainer_idle == a2.trainer_idle);

    // trainer idle + busy spans exactly [startup, makespan - sync_cost]
    CHECK(a1.trainer_idle + a1.trainer_busy ==
          doctest::Approx(a1.makespan - a1.t_async_startup - a1.sync_cost).epsilon(1e-12));
    CHECK(a1.trainer_idle >= 0.0);
    CHECK(a1.inference_idle >= 0.0);

    SimReport s = simulate_iteration(SimMode::sync, t, 0.21, 2, 0.4);
    CHECK(s.trainer_idle == doctest::Approx(0.0));
}

TEST_CASE("monotonicity: growing any duration never shrinks the makespan") {
    Rng rng(71);
    for (int trial = 0; trial < 40; ++trial) {
        auto t = random_trace(rng, 3, 4);
        SimReport base_async = simulate_iteration(SimMode::async, t, 0.15, 2, 0.1);
        SimReport base_sync = simulate_iteration(SimMode::sync, t, 0.15, 2, 0.1);
        auto bumped = t;
        int w = rng.uniform_int(0, 2), i = rng.uniform_int(0, 3);
        bumped.batches[w][i] += 0.7;
        CHECK(simulate_iteration(SimMode::async, bumped, 0.15, 2, 0.1).makespan >=
              base_async.makespan - 1e-12);
        CHECK(simulate_iteration(SimMode::sync, bumped, 0.15, 2, 0.1).makespan >=
              base_sync.makespan - 1e-12);
    }
}

TEST_CASE("continuous inference keeps slots busy") {
    LatencyTrace t{{{4.0, 1.0}, {1.0, 1.0}}};
    // wave model: wave 0 ends at 4, completions {4,1,5,5}
    SimReport wave = simulate_iteration(SimMode::async, t, 0.0, 1, 0.0, InferenceModel::wave);
    // continuous: slot freed at 1 takes the next request: completions {4,1,2,3}
    SimReport cont =
        simulate_iteration(SimMode::async, t, 0.0, 1, 0.0, InferenceModel::continuous);
    CHECK(wave.makespan == doctest::Approx(5.0));
    CHECK(cont.makespan == doctest::Approx(4.0));
}

TEST_CASE("scaling experiment: identity baseline and deterministic reports") {
    ScalingWorkload w;
    auto r1 = scaling_experiment(w, {1});
    auto r2 = scaling_experiment(w, {1});
    REQUIRE(r1.size() == 1);
    CHECK(r1[0].makespan == r2[0].makespan);
    CHECK(r1[0].tps == r2[0].tps);
    CHECK(r1[0].devices == w.base_trainers + w.base_instances);

    auto sweep = scaling_experiment(w, {1, 2, 4});
    REQUIRE(sweep.size() == 3);
    CHECK(sweep[0].makespan == r1[0].makespan);  // shard 0 identical at every scale
    CHECK(sweep[1].tps >= sweep[0].tps);         // weak scaling: TPS nondecreasing
    CHECK(sweep[2].tps >= sweep[1].tps);
    for (const auto& r : sweep) {
        CHECK(r.tpspd > 0.0);
        CHECK(r.tpspd == doctest::Approx(r.tps / r.devices));
    }
}

TEST_CASE("trace file io round-trip") {
    namespace fs = std::filesystem;
    fs::path path = fs::temp_directory_path() / "parl_test_trace.txt";
    LatencyTrace t{{{3.0, 5.0}, {2.0, 4.0}}};
    save_trace(path.string(), t);
    LatencyTrace u = load_trace(path.string());
    CHECK(u.batches == t.batches);
    fs::remove(path);

    std::ofstream os(path);
    os << "# comment line\n1.5 2.5\nbogus 3\n";
    os.close();
    CHECK_THROWS_AS(load_trace(path.string()), IoError);
    fs::remove(path);
}

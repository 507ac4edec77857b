#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "parl/loopback.hpp"
#include "parl/rollout.hpp"
#include "parl/rng.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <json.hpp>

using namespace parl;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.vocab_size = 16;
    c.d_model = 16;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_ff = 16;
    c.max_seq_len = 48;
    return c;
}

std::vector<RolloutRequest> make_requests(int n) {
    std::vector<RolloutRequest> reqs(n);
    for (int i = 0; i < n; ++i) {
        reqs[i].prompt_id = i;
        reqs[i].group_slot = i;
        reqs[i].group_id = i;
        reqs[i].prompt = {1, static_cast<TokenId>(4 + (i % 8)), 3};
    }
    return reqs;
}

LatencyModel trace_latency(std::vector<std::vector<double>> trace) {
    LatencyModel lm;
    lm.kind = LatencyModel::Kind::deterministic_trace;
    lm.trace = std::move(trace);
    return lm;
}

}  // namespace

TEST_CASE("sync_weights broadcasts one version to all instances") {
    ModelParams p = ModelParams::init(small_config(), 3);
    RolloutService service(4, 2, LatencyModel{});
    service.sync_weights(p);
    for (int i = 0; i < 4; ++i) CHECK(service.synced_version(i) == p.version());

    // idempotent second sync
    service.sync_weights(p);
    for (int i = 0; i < 4; ++i) CHECK(service.synced_version(i) == p.version());
}

TEST_CASE("submit before sync and sync during generation are barrier violations") {
    ModelParams p = ModelParams::init(small_config(), 3);
    RolloutService service(1, 2, LatencyModel{});
    auto reqs = make_requests(2);
    GenConfig gen{4, 0.0};
    CHECK_THROWS_AS(service.submit_prompts_collect(reqs, 1, gen, 5), BarrierError);

    service.sync_weights(p);
    bool attempted = false;
    service.submit_prompts(reqs, 1, gen, 5, [&](RolloutResult) {
        if (!attempted) {
            attempted = true;
            CHECK_THROWS_AS(service.sync_weights(p), BarrierError);
        }
    });
    CHECK(attempted);

    // the sync was consumed; a second submit without sync is refused
    CHECK_THROWS_AS(service.submit_prompts_collect(reqs, 1, gen, 5), BarrierError);
}

TEST_CASE("even dispatch: 8 prompts, G=1, 2 instances -> 4 requests each") {
    ModelParams p = ModelParams::init(small_config(), 3);
    RolloutService service(2, 2, LatencyModel{});
    service.sync_weights(p);
    service.submit_prompts_collect(make_requests(8), 1, GenConfig{3, 0.0}, 7);
    REQUIRE(service.last_dispatch_counts().size() == 2);
    CHECK(service.last_dispatch_counts()[0] == 4);
    CHECK(service.last_dispatch_counts()[1] == 4);

    // odd totals differ by at most one
    service.sync_weights(p);
    service.submit_prompts_collect(make_requests(5), 3, GenConfig{3, 0.0}, 7);
    int lo = *std::min_element(service.last_dispatch_counts().begin(),
                               service.last_dispatch_counts().end());
    int hi = *std::max_element(service.last_dispatch_counts().begin(),
                               service.last_dispatch_counts().end());
    CHECK(hi - lo <= 1);
}

TEST_CASE("deterministic trace playback under continuous batching") {
    ModelParams p = ModelParams::init(small_config(), 3);
    RolloutService service(1, 2, trace_latency({{3.0, 5.0}, {2.0, 4.0}}));
    service.sync_weights(p);
    auto results = service.submit_prompts_collect(make_requests(4), 1, GenConfig{3, 0.0}, 7);
    REQUIRE(results.size() == 4);
    // durations 3,5,2,4 on 2 slots: completions 3,5,5,9; tie broken by prompt id
    CHECK(results[0].prompt_id == 0);
    CHECK(results[0].completion_time == doctest::Approx(3.0));
    CHECK(results[1].prompt_id == 1);
    CHECK(results[1].completion_time == doctest::Approx(5.0));
    CHECK(results[2].prompt_id == 2);
    CHECK(results[2].completion_time == doctest::Approx(5.0));
    CHECK(results[3].prompt_id == 3);
    CHECK(results[3].completion_time == doctest::Approx(9.0));
}

TEST_CASE("wave batching reproduces the static-batch schedule") {
    ModelParams p = ModelParams::init(small_config(), 3);
    RolloutService service(1, 2, trace_latency({{3.0, 5.0}, {2.0, 4.0}}), BatchingMode::wave);
    service.sync_weights(p);
    auto results = service.submit_prompts_collect(make_requests(4), 1, GenConfig{3, 0.0}, 7);
    REQUIRE(results.size() == 4);
    // wave 0 ends at 5; wave 1 completions 5+2=7 and 5+4=9
    std::map<std::int64_t, double> done;
    for (const auto& r : results) done[r.prompt_id] = r.completion_time;
    CHECK(done[0] == doctest::Approx(3.0));
    CHECK(done[1] == doctest::Approx(5.0));
    CHECK(done[2] == doctest::Approx(7.0));
    CHECK(done[3] == doctest::Approx(9.0));
}

TEST_CASE("placement invariance: instance count changes timing, never content") {
    ModelParams p = ModelParams::init(small_config(), 9);
    GenConfig gen{5, 0.9};
    auto run_with = [&](int instances) {
        RolloutService service(instances, 2, LatencyModel{});
        service.sync_weights(p);
        auto results = service.submit_prompts_collect(make_requests(6), 2, gen, 1234);
        std::map<std::pair<std::int64_t, int>, std::vector<TokenId>> content;
        for (const auto& r : results) content[{r.prompt_id, r.rollout_index}] = r.response;
        return content;
    };
    auto one = run_with(1);
    auto three = run_with(3);
    REQUIRE(one.size() == 12);
    CHECK(one == three);
}

TEST_CASE("content/timing separation: latency model never changes tokens or logprobs") {
    ModelParams p = ModelParams::init(small_config(), 9);
    GenConfig gen{5, 0.8};
    auto collect = [&](const LatencyModel& lm) {
        RolloutService service(2, 2, lm);
        service.sync_weights(p);
        return service.submit_prompts_collect(make_requests(4), 2, gen, 777);
    };
    LatencyModel fast;
    fast.prefill_cost = 1e-4;
    fast.decode_cost = 1e-3;
    fast.jitter = 0.0;
    LatencyModel slow;
    slow.prefill_cost = 0.5;
    slow.decode_cost = 2.0;
    slow.jitter = 0.3;
    auto a = collect(fast);
    auto b = collect(slow);
    auto key = [](const RolloutResult& r) { return std::make_pair(r.prompt_id, r.rollout_index); };
    std::map<std::pair<std::int64_t, int>, const RolloutResult*> bm;
    for (const auto& r : b) bm[key(r)] = &r;
    bool any_time_differs = false;
    for (const auto& r : a) {
        const RolloutResult* other = bm.at(key(r));
        CHECK(r.response == other->response);
        CHECK(r.old_logprobs == other->old_logprobs);
        if (std::fabs(r.completion_time - other->completion_time) > 1e-12)
            any_time_differs = true;
    }
    CHECK(any_time_differs);
}

TEST_CASE("conservation: every request yields exactly one result") {
    ModelParams p = ModelParams::init(small_config(), 9);
    RolloutService service(3, 2, LatencyModel{});
    service.sync_weights(p);
    auto results = service.submit_prompts_collect(make_requests(5), 4, GenConfig{4, 1.0}, 3);
    CHECK(results.size() == 20);
    std::set<std::pair<std::int64_t, int>> seen;
    for (const auto& r : results) {
        CHECK(r.completion_time > 0.0);
        seen.insert({r.prompt_id, r.rollout_index});
    }
    CHECK(seen.size() == 20);

    // results arrive ordered by completion time
    for (std::size_t i = 1; i < results.size(); ++i)
        CHECK(results[i - 1].completion_time <= results[i].completion_time);
}

TEST_CASE("score_logprobs equals the forward oracle and is deterministic") {
    ModelConfig cfg = small_config();
    ModelParams p = ModelParams::init(cfg, 15);
    RolloutService service(1, 1, LatencyModel{});
    service.sync_weights(p);

    std::vector<TokenId> prompt{1, 6, 3};
    auto response = sample_tokens(p, prompt, 4, 0.0, 5);
    auto scored = service.score_logprobs(0, prompt, response);
    auto again = service.score_logprobs(0, prompt, response);
    CHECK(scored == again);
    REQUIRE(scored.size() == response.size());

    std::vector<TokenId> tokens = prompt;
    tokens.insert(tokens.end(), response.begin(), response.end());
    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i);
    std::vector<std::int32_t> labels(tokens.size(), kIgnoreLabel);
    for (std::size_t i = 0; i < response.size(); ++i) labels[prompt.size() + i] = response[i];
    auto oracle = forward_logprobs(p, tokens, positions, AttentionMaskSpec::causal(), labels);
    for (std::size_t i = 0; i < scored.size(); ++i) CHECK(scored[i] == oracle.logprobs[i]);

    CHECK(service.score_logprobs(0, prompt, {}).empty());
}

TEST_CASE("empty prompt is an input error") {
    ModelParams p = ModelParams::init(small_config(), 9);
    RolloutService service(1, 1, LatencyModel{});
    service.sync_weights(p);
    std::vector<RolloutRequest> reqs(1);
    reqs[0].prompt_id = 0;
    CHECK_THROWS_AS(service.submit_prompts_collect(reqs, 1, GenConfig{2, 0.0}, 1), ShapeError);
}

TEST_CASE("loopback socket mode serves the frozen record format") {
    ModelConfig cfg = small_config();
    ModelParams p = ModelParams::init(cfg, 33);
    LatencyModel lm;
    lm.jitter = 0.0;
    LoopbackServer server(p.clone(), lm, GenConfig{4, 0.0});
    server.start();
    REQUIRE(server.port() > 0);

    int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    REQUIRE(fd >= 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(static_cast<std::uint16_t>(server.port()));
    REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0);

    std::string req = R"({"prompt_id": 5, "tokens": [1, 6, 3], "seed": 11})" "\n"
                      R"({"prompt_id": 6, "tokens": [1, 9, 3]})" "\n";
    REQUIRE(::send(fd, req.data(), req.size(), 0) == static_cast<ssize_t>(req.size()));

    std::string buf;
    char chunk[4096];
    while (std::count(buf.begin(), buf.end(), '\n') < 2) {
        ssize_t n = ::recv(fd, chunk, sizeof(chunk), 0);
        REQUIRE(n > 0);
        buf.append(chunk, static_cast<std::size_t>(n));
    }
    ::close(fd);
    server.stop();

    auto nl = buf.find('\n');
    auto first = nlohmann::json::parse(buf.substr(0, nl));
    CHECK(first.at("prompt_id") == 5);
    auto response = first.at("response").get<std::vector<TokenId>>();
    auto logprobs = first.at("logprobs").get<std::vector<double>>();
    CHECK(first.at("completion_time").get<double>() > 0.0);
    CHECK(response == sample_tokens(p, std::vector<TokenId>{1, 6, 3}, 4, 0.0,
                                    mix_seed(11, 5, 0)));
    CHECK(logprobs.size() == response.size());
}

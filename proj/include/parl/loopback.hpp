#pragma once

#include <atomic>
#include <cstdint>
#include <thread>

#include "parl/model.hpp"
#include "parl/rollout.hpp"

namespace parl {

// Optional loopback socket front-end for the rollout service: newline-
// delimited JSON request/response records over TCP on 127.0.0.1. One request
// per line:
//   {"prompt_id": 3, "tokens": [1,5,3], "gen_config": {"max_new_tokens": 8,
//    "temperature": 1.0}, "seed": 42}
// answered by
//   {"prompt_id": 3, "response": [...], "logprobs": [...],
//    "completion_time": 0.173}
// Field names are frozen in docs/formats.md. Excluded from acceptance runs;
// integration realism only.
class LoopbackServer {
public:
    LoopbackServer(ModelParams params, LatencyModel latency, GenConfig default_gen);
    ~LoopbackServer();

    void start();  // binds an ephemeral port and spawns the accept thread
    void stop();
    int port() const { return port_; }

private:
    void serve();
    std::string handle_line(const std::string& line);

    ModelParams params_;
    LatencyModel latency_;
    GenConfig default_gen_;
    int listen_fd_ = -1;
    int port_ = 0;
    std::atomic<bool> running_{false};
    std::thread thread_;
};

}  // namespace parl

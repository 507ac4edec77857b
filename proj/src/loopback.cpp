#include "parl/loopback.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstring>
#include <string>

#include <json.hpp>

#include "parl/rng.hpp"

namespace parl {

using nlohmann::json;

LoopbackServer::LoopbackServer(ModelParams params, LatencyModel latency, GenConfig default_gen)
    : params_(std::move(params)), latency_(std::move(latency)), default_gen_(default_gen) {
    latency_.validate();
}

LoopbackServer::~LoopbackServer() { stop(); }

void LoopbackServer::start() {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw IoError("loopback: socket() failed");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;  // ephemeral
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        ::close(listen_fd_);
        throw IoError("loopback: bind() failed");
    }
    socklen_t len = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    if (::listen(listen_fd_, 4) != 0) {
        ::close(listen_fd_);
        throw IoError("loopback: listen() failed");
    }
    running_ = true;
    thread_ = std::thread([this] { serve(); });
}

void LoopbackServer::stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (thread_.joinable()) thread_.join();
}

void LoopbackServer::serve() {
    while (running_) {
        int client = ::accept(listen_fd_, nullptr, nullptr);
        if (client < 0) {
            if (!running_) break;
            continue;
        }
        std::string buf;
        char chunk[4096];
        while (running_) {
            ssize_t n = ::recv(client, chunk, sizeof(chunk), 0);
            if (n <= 0) break;
            buf.append(chunk, static_cast<std::size_t>(n));
            std::size_t nl;
            while ((nl = buf.find('\n')) != std::string::npos) {
                std::string line = buf.substr(0, nl);
                buf.erase(0, nl + 1);
                if (line.empty()) continue;
                std::string reply = handle_line(line);
                reply.push_back('\n');
                std::size_t sent = 0;
                while (sent < reply.size()) {
                    ssize_t w = ::send(client, reply.data() + sent, reply.size() - sent, 0);
                    if (w <= 0) break;
                    sent += static_cast<std::size_t>(w);
                }
            }
        }
        ::close(client);
    }
}

std::string LoopbackServer::handle_line(const std::string& line) {
    try {
        json req = json::parse(line);
        std::int64_t prompt_id = req.at("prompt_id").get<std::int64_t>();
        auto prompt = req.at("tokens").get<std::vector<TokenId>>();
        GenConfig gen = default_gen_;
        if (req.contains("gen_config")) {
            const auto& g = req.at("gen_config");
            gen.max_new_tokens = g.value("max_new_tokens", gen.max_new_tokens);
            gen.temperature = g.value("temperature", gen.temperature);
        }
        std::uint64_t seed = req.value("seed", static_cast<std::uint64_t>(prompt_id));
        std::uint64_t rseed = mix_seed(seed, static_cast<std::uint64_t>(prompt_id), 0);

        std::vector<TokenId> response =
            sample_tokens(params_, prompt, gen.max_new_tokens, gen.temperature, rseed);
        std::vector<double> logprobs;
        if (!response.empty()) {
            std::vector<TokenId> tokens(prompt.begin(), prompt.end());
            tokens.insert(tokens.end(), response.begin(), response.end());
            std::vector<int> positions(tokens.size());
            for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i);
            std::vector<std::int32_t> labels(tokens.size(), kIgnoreLabel);
            for (std::size_t i = 0; i < response.size(); ++i)
                labels[prompt.size() + i] = response[i];
            logprobs = forward_logprobs(params_, tokens, positions, AttentionMaskSpec::causal(),
                                        labels)
                           .logprobs;
        }
        double base = latency_.prefill_cost * static_cast<double>(prompt.size()) +
                      latency_.decode_cost * static_cast<double>(std::max<std::size_t>(
                                                 response.size(), 1));
        if (latency_.jitter > 0.0) {
            Rng jr(mix_seed(rseed, 0x6a697474ull));
            base *= 1.0 + latency_.jitter * (2.0 * jr.uniform() - 1.0);
        }
        json resp = {{"prompt_id", prompt_id},
                     {"response", response},
                     {"logprobs", logprobs},
                     {"completion_time", base}};
        return resp.dump();
    } catch (const std::exception& e) {
        json err = {{"error", e.what()}};
        return err.dump();
    }
}

}  // namespace parl

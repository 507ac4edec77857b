#include "parl/metrics.hpp"

#include <json.hpp>

namespace parl {

using nlohmann::json;

MetricsWriter::MetricsWriter(const std::string& path, std::string run_id)
    : path_(path), run_id_(std::move(run_id)), os_(path, std::ios::trunc) {
    if (!os_) throw IoError("cannot open metrics file for writing: " + path);
}

void MetricsWriter::write_iteration(const IterationReport& rep) {
    json j = {{"step", rep.step},
              {"run_id", run_id_},
              {"reward_mean", rep.reward_mean},
              {"reward_min", rep.reward_min},
              {"reward_max", rep.reward_max},
              {"objective", rep.loss},
              {"kl_mean", rep.kl_mean},
              {"clip_fraction", rep.clip_fraction},
              {"token_count", rep.tokens_trained},
              {"samples_consumed", rep.samples_consumed},
              {"t_first_sample", rep.t_first_sample},
              {"t_iteration", rep.t_iteration},
              {"queue_max_depth", rep.queue_max_depth}};
    os_ << j.dump() << '\n';
    os_.flush();
}

void MetricsWriter::write_record(const std::string& json_line) {
    os_ << json_line << '\n';
    os_.flush();
}

std::vector<MetricsRecord> read_metrics(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open metrics file: " + path);
    std::vector<MetricsRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        MetricsRecord r;
        r.step = j.value("step", 0L);
        r.run_id = j.value("run_id", std::string());
        r.reward_mean = j.value("reward_mean", 0.0);
        r.reward_min = j.value("reward_min", 0.0);
        r.reward_max = j.value("reward_max", 0.0);
        r.loss = j.value("objective", 0.0);
        r.kl_mean = j.value("kl_mean", 0.0);
        r.clip_fraction = j.value("clip_fraction", 0.0);
        r.tokens_trained = j.value("token_count", 0L);
        r.t_first_sample = j.value("t_first_sample", 0.0);
        r.t_iteration = j.value("t_iteration", 0.0);
        r.queue_max_depth = j.value("queue_max_depth", 0L);
        out.push_back(std::move(r));
    }
    return out;
}

void write_manifest(const std::string& path, const Manifest& m) {
    json j = {{"run_id", m.run_id},
              {"config_hash", m.config_hash},
              {"seed", m.seed},
              {"build_id", m.build_id},
              {"config", json::parse(m.config_json)},
              {"artifacts", m.artifacts}};
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open manifest for writing: " + path);
    os << j.dump(2) << '\n';
}

Manifest read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open manifest: " + path);
    json j = json::parse(is, nullptr, true);
    Manifest m;
    m.run_id = j.at("run_id").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::uint64_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.build_id = j.value("build_id", std::string());
    m.config_json = j.at("config").dump();
    m.artifacts = j.value("artifacts", std::vector<std::string>());
    return m;
}

std::string build_id_string() {
#if defined(__clang__)
    return std::string("clang-") + std::to_string(__clang_major__) + "." +
           std::to_string(__clang_minor__);
#elif defined(__GNUC__)
    return std::string("gcc-") + std::to_string(__GNUC__) + "." + std::to_string(__GNUC_MINOR__);
#else
    return "unknown-compiler";
#endif
}

}  // namespace parl

#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "parl/pipeline.hpp"

namespace parl {

// Append-only line-delimited JSON sink; one self-describing record per line.
class MetricsWriter {
public:
    MetricsWriter(const std::string& path, std::string run_id);

    void write_iteration(const IterationReport& rep);
    void write_record(const std::string& json_line);  // pre-serialized, no newline
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::string run_id_;
    std::ofstream os_;
};

struct MetricsRecord {
    long step = 0;
    double reward_mean = 0.0, reward_min = 0.0, reward_max = 0.0;
    double loss = 0.0, kl_mean = 0.0, clip_fraction = 0.0;
    long tokens_trained = 0;
    double t_first_sample = 0.0, t_iteration = 0.0;
    long queue_max_depth = 0;
    std::string run_id;
};

std::vector<MetricsRecord> read_metrics(const std::string& path);

// Run manifest: config, hash, seed, build id and the full artifact list.
struct Manifest {
    std::string run_id;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    std::string build_id;
    std::string config_json;  // canonical dump
    std::vector<std::string> artifacts;
};

void write_manifest(const std::string& path, const Manifest& m);
Manifest read_manifest(const std::string& path);

std::string build_id_string();

}  // namespace parl

#include "parl/event_sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>
#include <sstream>

#include "parl/rng.hpp"

namespace parl {

void LatencyTrace::validate() const {
    if (batches.empty()) throw ShapeError("empty latency trace");
    for (const auto& wave : batches) {
        if (wave.empty()) throw ShapeError("latency trace contains an empty inference batch");
        for (double t : wave)
            if (!(t > 0.0) || !std::isfinite(t))
                throw ShapeError("trace durations must be finite and > 0");
    }
}

int LatencyTrace::total_prompts() const {
    int n = 0;
    for (const auto& wave : batches) n += static_cast<int>(wave.size());
    return n;
}

bool LatencyTrace::rectangular() const {
    for (const auto& wave : batches)
        if (wave.size() != batches[0].size()) return false;
    return true;
}

double t_sync(const LatencyTrace& trace) {
    trace.validate();
    double total = 0.0;
    for (const auto& wave : trace.batches) {
        double wave_max = wave[0];
        for (double t : wave) wave_max = std::max(wave_max, t);
        total += wave_max;
    }
    return total;
}

double t_async(const LatencyTrace& trace) {
    trace.validate();
    const auto& first = trace.batches[0];
    double m = first[0];
    for (double t : first) m = std::min(m, t);
    return m;
}

namespace {

// Completion time of every prompt relative to inference start.
std::vector<double> completion_times(const LatencyTrace& trace, InferenceModel model) {
    std::vector<double> out;
    out.reserve(trace.total_prompts());
    if (model == InferenceModel::wave) {
        double wave_start = 0.0;
        for (const auto& wave : trace.batches) {
            double wave_max = 0.0;
            for (double t : wave) {
                double done = wave_start + t;
                out.push_back(done);
                wave_max = std::max(wave_max, done);
            }
            wave_start = wave_max;
        }
    } else {
        const int slots = trace.slots();
        std::priority_queue<double, std::vector<double>, std::greater<>> free_at;
        for (int s = 0; s < slots; ++s) free_at.push(0.0);
        for (const auto& wave : trace.batches)
            for (double t : wave) {
                double start = free_at.top();
                free_at.pop();
                out.push_back(start + t);
                free_at.push(start + t);
            }
    }
    return out;
}

}  // namespace

SimReport simulate_iteration(SimMode mode, const LatencyTrace& trace,
                             double train_cost_per_microstep, int m_train, double sync_cost,
                             InferenceModel inference_model, long tokens_per_prompt,
                             int devices) {
    trace.validate();
    if (m_train < 1) throw ConfigError("m_train must be >= 1");
    if (train_cost_per_microstep < 0.0) throw ConfigError("train cost must be >= 0");
    if (sync_cost < 0.0) throw ConfigError("sync cost must be >= 0");
    const int total = trace.total_prompts();
    if (total % m_train != 0)
        throw ConfigError("trace with " + std::to_string(total) +
                          " prompts does not divide into micro-steps of " +
                          std::to_string(m_train));

    std::vector<double> done = completion_times(trace, inference_model);
    std::vector<double> sorted = done;
    std::sort(sorted.begin(), sorted.end());
    const double first_done = sorted.front();
    const double all_done = sorted.back();
    const int micro_steps = total / m_train;

    SimReport rep;
    rep.mode = mode;
    rep.sync_cost = sync_cost;
    rep.micro_steps = micro_steps;
    rep.t_sync_startup = all_done;
    rep.t_async_startup = first_done;
    rep.trainer_busy = micro_steps * train_cost_per_microstep;

    double trainer_start, end;
    if (mode == SimMode::sync) {
        trainer_start = all_done;
        end = all_done + micro_steps * train_cost_per_microstep;
    } else {
        trainer_start = first_done;
        end = 0.0;
        for (int k = 0; k < micro_steps; ++k) {
            double ready = sorted[static_cast<std::size_t>(k + 1) * m_train - 1];
            double start = std::max(end, ready);
            end = start + train_cost_per_microstep;
        }
    }
    rep.makespan = sync_cost + end;
    rep.trainer_idle = (end - trainer_start) - rep.trainer_busy;
    rep.inference_idle = end - all_done;
    rep.tokens = static_cast<long>(total) * tokens_per_prompt;
    rep.devices = devices;
    rep.tps = rep.makespan > 0.0 ? static_cast<double>(rep.tokens) / rep.makespan : 0.0;
    rep.tpspd = rep.tps / devices;
    return rep;
}

std::vector<SimReport> scaling_experiment(const ScalingWorkload& w,
                                          const std::vector<int>& multipliers) {
    if (w.base_trainers < 1 || w.base_instances < 1)
        throw ConfigError("scaling workload needs >= 1 trainer and >= 1 instance");
    if (w.waves < 1 || w.slots < 1) throw ConfigError("scaling workload trace shape invalid");
    for (int m : multipliers)
        if (m < 1) throw ConfigError("device multipliers must be >= 1");

    // Per-shard trace, identical for a given shard index at every scale
    // (weak scaling holds per-device work constant).
    auto shard_trace = [&](int shard) {
        LatencyTrace t;
        Rng rng(mix_seed(w.seed, static_cast<std::uint64_t>(shard), 0x7472616345ull));
        t.batches.assign(w.waves, std::vector<double>(w.slots, 0.0));
        for (auto& wave : t.batches)
            for (double& d : wave) {
                double u = 2.0 * rng.uniform() - 1.0;
                d = std::max(1e-9, w.mean_duration + w.duration_spread * u);
            }
        return t;
    };

    std::vector<SimReport> out;
    for (int mult : multipliers) {
        const int shards = mult * w.base_trainers;
        const int devices = mult * (w.base_trainers + w.base_instances);
        double slowest_shard = 0.0;
        long tokens = 0;
        double startup_sync = 0.0, startup_async = 0.0;
        for (int s = 0; s < shards; ++s) {
            SimReport r = simulate_iteration(SimMode::async, shard_trace(s),
                                             w.train_cost_per_microstep, w.m_train, 0.0,
                                             InferenceModel::wave, w.tokens_per_prompt, 1);
            slowest_shard = std::max(slowest_shard, r.makespan);
            tokens += r.tokens;
            if (s == 0) {
                startup_sync = r.t_sync_startup;
                startup_async = r.t_async_startup;
            }
        }
        SimReport rep;
        rep.mode = SimMode::async;
        rep.sync_cost = w.sync_cost_base + w.sync_cost_per_device * devices;
        rep.makespan = rep.sync_cost + slowest_shard;
        rep.micro_steps = shards * (w.waves * w.slots / w.m_train);
        rep.t_sync_startup = startup_sync;
        rep.t_async_startup = startup_async;
        rep.tokens = tokens;
        rep.devices = devices;
        rep.tps = static_cast<double>(tokens) / rep.makespan;
        rep.tpspd = rep.tps / devices;
        out.push_back(rep);
    }
    return out;
}

LatencyTrace load_trace(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open trace file: " + path);
    LatencyTrace trace;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::vector<double> wave;
        double v;
        while (ls >> v) wave.push_back(v);
        if (!ls.eof()) throw IoError("bad token in trace file line: " + line);
        if (!wave.empty()) trace.batches.push_back(std::move(wave));
    }
    trace.validate();
    return trace;
}

void save_trace(const std::string& path, const LatencyTrace& trace) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open trace file for writing: " + path);
    for (const auto& wave : trace.batches) {
        for (std::size_t i = 0; i < wave.size(); ++i) {
            if (i) os << ' ';
            os << wave[i];
        }
        os << '\n';
    }
}

}  // namespace parl

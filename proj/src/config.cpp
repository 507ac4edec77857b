#include "parl/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace parl {

using nlohmann::json;

namespace {

std::string granularity_str(LossGranularity g) {
    return g == LossGranularity::token ? "token" : "sequence";
}
LossGranularity granularity_from(const std::string& s) {
    if (s == "token") return LossGranularity::token;
    if (s == "sequence") return LossGranularity::sequence;
    throw ConfigError("hyper.granularity must be 'token' or 'sequence', got '" + s + "'");
}
std::string old_policy_str(OldPolicyMode m) {
    return m == OldPolicyMode::one_step_delayed ? "one_step_delayed" : "rollout_weights";
}
OldPolicyMode old_policy_from(const std::string& s) {
    if (s == "one_step_delayed") return OldPolicyMode::one_step_delayed;
    if (s == "rollout_weights") return OldPolicyMode::rollout_weights;
    throw ConfigError("hyper.old_policy must be 'one_step_delayed' or 'rollout_weights'");
}
std::string accumulation_str(AccumulationMode m) {
    return m == AccumulationMode::arrival ? "arrival" : "canonical";
}
AccumulationMode accumulation_from(const std::string& s) {
    if (s == "arrival") return AccumulationMode::arrival;
    if (s == "canonical") return AccumulationMode::canonical;
    throw ConfigError("hyper.accumulation must be 'arrival' or 'canonical'");
}
std::string mode_str(RunMode m) { return m == RunMode::sync ? "sync" : "async"; }
RunMode mode_from(const std::string& s) {
    if (s == "sync") return RunMode::sync;
    if (s == "async") return RunMode::async;
    throw ConfigError("run.mode must be 'sync' or 'async'");
}
std::string batching_str(BatchingMode m) {
    return m == BatchingMode::continuous ? "continuous" : "wave";
}
BatchingMode batching_from(const std::string& s) {
    if (s == "continuous") return BatchingMode::continuous;
    if (s == "wave") return BatchingMode::wave;
    throw ConfigError("rollout.batching must be 'continuous' or 'wave'");
}
std::string latency_kind_str(LatencyModel::Kind k) {
    return k == LatencyModel::Kind::per_token_cost ? "per_token_cost" : "deterministic_trace";
}
LatencyModel::Kind latency_kind_from(const std::string& s) {
    if (s == "per_token_cost") return LatencyModel::Kind::per_token_cost;
    if (s == "deterministic_trace") return LatencyModel::Kind::deterministic_trace;
    throw ConfigError("rollout.latency.kind must be 'per_token_cost' or 'deterministic_trace'");
}

void check_keys(const json& j, const std::string& section,
                std::initializer_list<const char*> allowed) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                ok = true;
                break;
            }
        if (!ok) throw ConfigError("unknown config key '" + section + "." + it.key() + "'");
    }
}

json config_to_json(const ExperimentConfig& c) {
    json j;
    j["model"] = {{"vocab_size", c.model.vocab_size},   {"d_model", c.model.d_model},
                  {"n_layers", c.model.n_layers},       {"n_heads", c.model.n_heads},
                  {"d_ff", c.model.d_ff},               {"max_seq_len", c.model.max_seq_len}};
    j["batch"] = {{"prompts_per_batch", c.batch.prompts_per_batch},
                  {"rollouts_per_group", c.batch.rollouts_per_group},
                  {"microbatch_size", c.batch.microbatch_size}};
    j["hyper"] = {{"lr", c.hyper.lr},
                  {"epsilon", c.hyper.epsilon},
                  {"beta", c.hyper.beta},
                  {"granularity", granularity_str(c.hyper.granularity)},
                  {"old_policy", old_policy_str(c.hyper.old_policy)},
                  {"accumulation", accumulation_str(c.hyper.accumulation)},
                  {"advantage_mean_only", c.hyper.advantage_mean_only}};
    json lat = {{"kind", latency_kind_str(c.rollout.latency.kind)},
                {"prefill_cost", c.rollout.latency.prefill_cost},
                {"decode_cost", c.rollout.latency.decode_cost},
                {"jitter", c.rollout.latency.jitter}};
    if (c.rollout.latency.kind == LatencyModel::Kind::deterministic_trace)
        lat["trace"] = c.rollout.latency.trace;
    j["rollout"] = {{"instances", c.rollout.instances},
                    {"batch_slots", c.rollout.batch_slots},
                    {"batching", batching_str(c.rollout.batching)},
                    {"latency", lat},
                    {"temperature", c.rollout.temperature},
                    {"max_new_tokens", c.rollout.max_new_tokens}};
    j["task"] = {{"kind", to_string(c.task.kind)},
                 {"prompt_payload_min", c.task.prompt_payload_min},
                 {"prompt_payload_max", c.task.prompt_payload_max},
                 {"vocab_subset", c.task.vocab_subset},
                 {"dataset_size", c.task.dataset_size},
                 {"seed", c.task.seed},
                 {"reward", to_string(c.task.reward)},
                 {"length_band_lo", c.task.length_band_lo},
                 {"length_band_hi", c.task.length_band_hi}};
    j["run"] = {{"mode", mode_str(c.run.mode)},
                {"steps", c.run.steps},
                {"seed", c.run.seed},
                {"shared_prompt", c.run.shared_prompt},
                {"shuffle", c.run.shuffle},
                {"out_dir", c.run.out_dir},
                {"train_cost_per_microstep", c.run.train_cost_per_microstep},
                {"queue_capacity", c.run.queue_capacity},
                {"stall_timeout_ms", c.run.stall_timeout_ms}};
    return j;
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    check_keys(j, "", {"model", "batch", "hyper", "rollout", "task", "run"});
    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m, "model", {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff",
                                "max_seq_len"});
        c.model.vocab_size = m.value("vocab_size", c.model.vocab_size);
        c.model.d_model = m.value("d_model", c.model.d_model);
        c.model.n_layers = m.value("n_layers", c.model.n_layers);
        c.model.n_heads = m.value("n_heads", c.model.n_heads);
        c.model.d_ff = m.value("d_ff", c.model.d_ff);
        c.model.max_seq_len = m.value("max_seq_len", c.model.max_seq_len);
    }
    if (j.contains("batch")) {
        const auto& b = j.at("batch");
        check_keys(b, "batch", {"prompts_per_batch", "rollouts_per_group", "microbatch_size"});
        c.batch.prompts_per_batch = b.value("prompts_per_batch", c.batch.prompts_per_batch);
        c.batch.rollouts_per_group = b.value("rollouts_per_group", c.batch.rollouts_per_group);
        c.batch.microbatch_size = b.value("microbatch_size", c.batch.microbatch_size);
    }
    if (j.contains("hyper")) {
        const auto& h = j.at("hyper");
        check_keys(h, "hyper", {"lr", "epsilon", "beta", "granularity", "old_policy",
                                "accumulation", "advantage_mean_only"});
        c.hyper.lr = h.value("lr", c.hyper.lr);
        c.hyper.epsilon = h.value("epsilon", c.hyper.epsilon);
        c.hyper.beta = h.value("beta", c.hyper.beta);
        if (h.contains("granularity"))
            c.hyper.granularity = granularity_from(h.at("granularity").get<std::string>());
        if (h.contains("old_policy"))
            c.hyper.old_policy = old_policy_from(h.at("old_policy").get<std::string>());
        if (h.contains("accumulation"))
            c.hyper.accumulation = accumulation_from(h.at("accumulation").get<std::string>());
        c.hyper.advantage_mean_only = h.value("advantage_mean_only", c.hyper.advantage_mean_only);
    }
    if (j.contains("rollout")) {
        const auto& r = j.at("rollout");
        check_keys(r, "rollout", {"instances", "batch_slots", "batching", "latency",
                                  "temperature", "max_new_tokens"});
        c.rollout.instances = r.value("instances", c.rollout.instances);
        c.rollout.batch_slots = r.value("batch_slots", c.rollout.batch_slots);
        if (r.contains("batching"))
            c.rollout.batching = batching_from(r.at("batching").get<std::string>());
        c.rollout.temperature = r.value("temperature", c.rollout.temperature);
        c.rollout.max_new_tokens = r.value("max_new_tokens", c.rollout.max_new_tokens);
        if (r.contains("latency")) {
            const auto& l = r.at("latency");
            check_keys(l, "rollout.latency", {"kind", "prefill_cost", "decode_cost", "jitter",
                                              "trace"});
            if (l.contains("kind"))
                c.rollout.latency.kind = latency_kind_from(l.at("kind").get<std::string>());
            c.rollout.latency.prefill_cost = l.value("prefill_cost", c.rollout.latency.prefill_cost);
            c.rollout.latency.decode_cost = l.value("decode_cost", c.rollout.latency.decode_cost);
            c.rollout.latency.jitter = l.value("jitter", c.rollout.latency.jitter);
            if (l.contains("trace"))
                c.rollout.latency.trace = l.at("trace").get<std::vector<std::vector<double>>>();
        }
    }
    if (j.contains("task")) {
        const auto& t = j.at("task");
        check_keys(t, "task", {"kind", "prompt_payload_min", "prompt_payload_max", "vocab_subset",
                               "dataset_size", "seed", "reward", "length_band_lo",
                               "length_band_hi"});
        if (t.contains("kind")) c.task.kind = task_kind_from_string(t.at("kind").get<std::string>());
        c.task.prompt_payload_min = t.value("prompt_payload_min", c.task.prompt_payload_min);
        c.task.prompt_payload_max = t.value("prompt_payload_max", c.task.prompt_payload_max);
        c.task.vocab_subset = t.value("vocab_subset", c.task.vocab_subset);
        c.task.dataset_size = t.value("dataset_size", c.task.dataset_size);
        c.task.seed = t.value("seed", c.task.seed);
        if (t.contains("reward"))
            c.task.reward = reward_kind_from_string(t.at("reward").get<std::string>());
        c.task.length_band_lo = t.value("length_band_lo", c.task.length_band_lo);
        c.task.length_band_hi = t.value("length_band_hi", c.task.length_band_hi);
    }
    if (j.contains("run")) {
        const auto& r = j.at("run");
        check_keys(r, "run", {"mode", "steps", "seed", "shared_prompt", "shuffle", "out_dir",
                              "train_cost_per_microstep", "queue_capacity", "stall_timeout_ms"});
        if (r.contains("mode")) c.run.mode = mode_from(r.at("mode").get<std::string>());
        c.run.steps = r.value("steps", c.run.steps);
        c.run.seed = r.value("seed", c.run.seed);
        c.run.shared_prompt = r.value("shared_prompt", c.run.shared_prompt);
        c.run.shuffle = r.value("shuffle", c.run.shuffle);
        c.run.out_dir = r.value("out_dir", c.run.out_dir);
        c.run.train_cost_per_microstep =
            r.value("train_cost_per_microstep", c.run.train_cost_per_microstep);
        c.run.queue_capacity = r.value("queue_capacity", c.run.queue_capacity);
        c.run.stall_timeout_ms = r.value("stall_timeout_ms", c.run.stall_timeout_ms);
    }
    return c;
}

std::uint64_t fnv1a_str(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace

void ExperimentConfig::validate() const {
    model.validate();
    PipelineSettings ps = pipeline_settings();
    ps.validate(model);
    if (rollout.instances < 1) throw ConfigError("rollout.instances must be >= 1");
    if (rollout.batch_slots < 1) throw ConfigError("rollout.batch_slots must be >= 1");
    rollout.latency.validate();
    if (run.steps < 0) throw ConfigError("run.steps must be >= 0");
}

PipelineSettings ExperimentConfig::pipeline_settings() const {
    PipelineSettings ps;
    ps.batch = batch;
    ps.hyper = hyper;
    ps.gen = gen_config();
    ps.task = task;
    ps.shared_prompt = run.shared_prompt;
    ps.train_cost_per_microstep = run.train_cost_per_microstep;
    ps.run_seed = run.seed;
    ps.queue_capacity = run.queue_capacity;
    ps.stall_timeout_ms = run.stall_timeout_ms;
    return ps;
}

GenConfig ExperimentConfig::gen_config() const {
    return GenConfig{rollout.max_new_tokens, rollout.temperature};
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(j);
}

std::string ExperimentConfig::to_json_text() const {
    return config_to_json(*this).dump(2) + "\n";
}

void ExperimentConfig::apply_override(const std::string& dotted_key, const std::string& value) {
    auto dot = dotted_key.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 >= dotted_key.size())
        throw ConfigError("override key must look like section.key, got '" + dotted_key + "'");
    json j = config_to_json(*this);
    json* node = &j;
    std::string rest = dotted_key;
    while (true) {
        auto d = rest.find('.');
        std::string head = d == std::string::npos ? rest : rest.substr(0, d);
        if (!node->contains(head))
            throw ConfigError("unknown config key in override: '" + dotted_key + "'");
        node = &(*node)[head];
        if (d == std::string::npos) break;
        rest = rest.substr(d + 1);
    }
    // Re-parse the value with the type of the existing entry.
    try {
        if (node->is_string())
            *node = value;
        else if (node->is_boolean())
            *node = (value == "true" || value == "1");
        else if (node->is_number_integer())
            *node = std::stoll(value);
        else if (node->is_number_unsigned())
            *node = static_cast<std::uint64_t>(std::stoull(value));
        else if (node->is_number_float())
            *node = std::stod(value);
        else
            *node = json::parse(value);  // arrays/objects: raw JSON
    } catch (const std::exception&) {
        throw ConfigError("cannot parse override value '" + value + "' for key '" + dotted_key +
                          "'");
    }
    *this = config_from_json(j);
}

std::uint64_t ExperimentConfig::config_hash() const {
    return fnv1a_str(config_to_json(*this).dump());
}

std::string ExperimentConfig::run_id() const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(config_hash()));
    return std::string(buf) + "-s" + std::to_string(run.seed);
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file: " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return ExperimentConfig::from_json_text(ss.str());
}

}  // namespace parl

#include "parl/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "parl/rng.hpp"

namespace parl {

void TaskSpec::validate(int vocab_size) const {
    if (prompt_payload_min < 1 || prompt_payload_max < prompt_payload_min)
        throw ConfigError("task payload length range invalid");
    if (vocab_subset < 1) throw ConfigError("task vocab_subset must be >= 1");
    if (kFirstPayloadToken + vocab_subset > vocab_size)
        throw ConfigError("vocab subset of " + std::to_string(vocab_subset) +
                          " payload tokens does not fit in vocab of " +
                          std::to_string(vocab_size));
    if (kind == TaskKind::arith_mod && vocab_subset < 2)
        throw ConfigError("arith_mod needs vocab_subset >= 2 for a usable base");
    if (dataset_size < 1) throw ConfigError("dataset_size must be >= 1");
    if (reward == RewardKind::length_band && (length_band_lo < 0 || length_band_hi < length_band_lo))
        throw ConfigError("length_band range invalid");
}

std::vector<TaskItem> generate_dataset(const TaskSpec& spec) {
    Rng rng(mix_seed(spec.seed, 0x7461736bull));  // "task"
    std::vector<TaskItem> items;
    items.reserve(spec.dataset_size);
    for (int i = 0; i < spec.dataset_size; ++i) {
        TaskItem item;
        if (spec.kind == TaskKind::arith_mod) {
            int base = spec.vocab_subset;
            int a = rng.uniform_int(0, base - 1);
            int b = rng.uniform_int(0, base - 1);
            item.prompt = {kBosToken, static_cast<TokenId>(kFirstPayloadToken + a),
                           static_cast<TokenId>(kFirstPayloadToken + b), kSepToken};
            item.target = {static_cast<TokenId>(kFirstPayloadToken + (a + b) % base), kEosToken};
        } else {
            int len = rng.uniform_int(spec.prompt_payload_min, spec.prompt_payload_max);
            std::vector<TokenId> payload(len);
            for (auto& t : payload)
                t = static_cast<TokenId>(kFirstPayloadToken +
                                         rng.uniform_int(0, spec.vocab_subset - 1));
            item.prompt.push_back(kBosToken);
            item.prompt.insert(item.prompt.end(), payload.begin(), payload.end());
            item.prompt.push_back(kSepToken);
            if (spec.kind == TaskKind::reverse) std::reverse(payload.begin(), payload.end());
            item.target = std::move(payload);
            item.target.push_back(kEosToken);
        }
        items.push_back(std::move(item));
    }
    return items;
}

double reward_score(RewardKind kind, const TaskSpec& spec, const std::vector<TokenId>& target,
                    const std::vector<TokenId>& response) {
    switch (kind) {
        case RewardKind::exact_match:
            return response == target ? 1.0 : 0.0;
        case RewardKind::prefix_overlap: {
            // fraction of the target covered by the matching prefix; a full
            // match ends with eos, which also terminates generation
            std::size_t n = std::min(target.size(), response.size());
            std::size_t match = 0;
            while (match < n && target[match] == response[match]) ++match;
            return target.empty() ? 1.0
                                  : static_cast<double>(match) / static_cast<double>(target.size());
        }
        case RewardKind::length_band: {
            auto len = static_cast<int>(response.size());
            return (len >= spec.length_band_lo && len <= spec.length_band_hi) ? 1.0 : 0.0;
        }
    }
    throw ConfigError("unknown reward kind");
}

RewardKind reward_kind_from_string(const std::string& s) {
    if (s == "exact_match") return RewardKind::exact_match;
    if (s == "prefix_overlap") return RewardKind::prefix_overlap;
    if (s == "length_band") return RewardKind::length_band;
    throw ConfigError("unknown reward kind: '" + s +
                      "' (expected exact_match, prefix_overlap or length_band)");
}

std::string to_string(RewardKind kind) {
    switch (kind) {
        case RewardKind::exact_match: return "exact_match";
        case RewardKind::prefix_overlap: return "prefix_overlap";
        case RewardKind::length_band: return "length_band";
    }
    return "?";
}

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "copy") return TaskKind::copy;
    if (s == "reverse") return TaskKind::reverse;
    if (s == "arith_mod") return TaskKind::arith_mod;
    throw ConfigError("unknown task kind: '" + s + "' (expected copy, reverse or arith_mod)");
}

std::string to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::copy: return "copy";
        case TaskKind::reverse: return "reverse";
        case TaskKind::arith_mod: return "arith_mod";
    }
    return "?";
}

Dataloader::Dataloader(std::vector<TaskItem> dataset, int batch_size, bool shuffle,
                       std::uint64_t seed)
    : dataset_(std::move(dataset)), batch_size_(batch_size), shuffle_(shuffle), seed_(seed) {
    if (dataset_.empty()) throw ConfigError("dataloader needs a nonempty dataset");
    if (batch_size_ < 1) throw ConfigError("batch size must be >= 1");
    if (batch_size_ > static_cast<int>(dataset_.size()))
        throw ConfigError("batch size " + std::to_string(batch_size_) + " exceeds dataset size " +
                          std::to_string(dataset_.size()));
    reshuffle();
}

void Dataloader::reshuffle() {
    order_.resize(dataset_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
    if (shuffle_) {
        Rng rng(mix_seed(seed_, epoch_, 0x73687566ull));  // "shuf"
        for (std::size_t i = order_.size(); i > 1; --i)
            std::swap(order_[i - 1], order_[rng.uniform_int(0, static_cast<int>(i) - 1)]);
    }
    cursor_ = 0;
    ++epoch_;
}

std::vector<int> Dataloader::next_batch_indices() {
    std::vector<int> batch;
    batch.reserve(batch_size_);
    for (int i = 0; i < batch_size_; ++i) {
        if (cursor_ >= order_.size()) reshuffle();
        batch.push_back(order_[cursor_++]);
    }
    return batch;
}

void save_dataset(const std::string& path, const std::vector<TaskItem>& items) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open dataset file for writing: " + path);
    for (const auto& item : items) {
        for (std::size_t i = 0; i < item.prompt.size(); ++i) {
            if (i) os << ' ';
            os << item.prompt[i];
        }
        os << " | ";
        for (std::size_t i = 0; i < item.target.size(); ++i) {
            if (i) os << ' ';
            os << item.target[i];
        }
        os << '\n';
    }
}

std::vector<TaskItem> load_dataset(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open dataset file: " + path);
    std::vector<TaskItem> items;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto bar = line.find('|');
        if (bar == std::string::npos) throw IoError("dataset line missing '|': " + line);
        TaskItem item;
        std::istringstream ps(line.substr(0, bar));
        int v;
        while (ps >> v) item.prompt.push_back(v);
        std::istringstream ts(line.substr(bar + 1));
        while (ts >> v) item.target.push_back(v);
        if (item.prompt.empty()) throw IoError("dataset line has empty prompt: " + line);
        items.push_back(std::move(item));
    }
    return items;
}

}  // namespace parl

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "parl/model.hpp"

namespace parl {

enum class TaskKind { copy, reverse, arith_mod };
enum class RewardKind { exact_match, prefix_overlap, length_band };

struct TaskSpec {
    TaskKind kind = TaskKind::copy;
    int prompt_payload_min = 1;  // payload tokens between bos and sep
    int prompt_payload_max = 2;
    int vocab_subset = 8;        // payload alphabet size, ids 4..4+subset-1
    int dataset_size = 64;
    std::uint64_t seed = 1;
    RewardKind reward = RewardKind::prefix_overlap;
    int length_band_lo = 1;      // length_band reward only
    int length_band_hi = 8;

    void validate(int vocab_size) const;
};

struct TaskItem {
    std::vector<TokenId> prompt;  // [bos, payload..., sep]
    std::vector<TokenId> target;  // [answer..., eos]
};

// Deterministic corpus for (spec.kind, spec.seed). copy: answer = payload;
// reverse: answer = reversed payload; arith_mod: prompt [bos, a, b, sep],
// answer (a+b) mod vocab_subset, digits encoded as 4+digit.
std::vector<TaskItem> generate_dataset(const TaskSpec& spec);

double reward_score(RewardKind kind, const TaskSpec& spec, const std::vector<TokenId>& target,
                    const std::vector<TokenId>& response);

RewardKind reward_kind_from_string(const std::string& s);
std::string to_string(RewardKind kind);
TaskKind task_kind_from_string(const std::string& s);
std::string to_string(TaskKind kind);

// Deterministic batch iterator. With shuffling on, draws a fresh seeded
// permutation per epoch; wraps around when exhausted.
class Dataloader {
public:
    Dataloader(std::vector<TaskItem> dataset, int batch_size, bool shuffle, std::uint64_t seed);

    // Indices into the dataset for the next batch.
    std::vector<int> next_batch_indices();
    const TaskItem& item(int index) const { return dataset_.at(index); }
    int size() const { return static_cast<int>(dataset_.size()); }
    int batch_size() const { return batch_size_; }

private:
    void reshuffle();

    std::vector<TaskItem> dataset_;
    int batch_size_;
    bool shuffle_;
    std::uint64_t seed_;
    std::vector<int> order_;
    std::size_t cursor_ = 0;
    std::uint64_t epoch_ = 0;
};

// Line format: "prompt ids | target ids", one item per line.
void save_dataset(const std::string& path, const std::vector<TaskItem>& items);
std::vector<TaskItem> load_dataset(const std::string& path);

}  // namespace parl

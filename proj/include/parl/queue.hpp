#pragma once

#include <chrono>
#include <condition_variable>
#include <deque>
#include <mutex>
#include <optional>

namespace parl {

// Bounded blocking FIFO, many producers / single consumer. push blocks while
// full, pop blocks while empty (with an optional deadline for the stall
// watchdog). Tracks high-water depth and total flow for the conservation
// checks.
template <typename T>
class BoundedQueue {
public:
    explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {}

    void push(T item) {
        std::unique_lock lock(mu_);
        not_full_.wait(lock, [&] { return q_.size() < capacity_; });
        q_.push_back(std::move(item));
        ++pushed_;
        if (q_.size() > max_depth_) max_depth_ = q_.size();
        not_empty_.notify_one();
    }

    T pop() {
        std::unique_lock lock(mu_);
        not_empty_.wait(lock, [&] { return !q_.empty(); });
        return pop_locked();
    }

    // Empty optional on timeout.
    std::optional<T> pop_for(std::chrono::milliseconds timeout) {
        std::unique_lock lock(mu_);
        if (!not_empty_.wait_for(lock, timeout, [&] { return !q_.empty(); })) return std::nullopt;
        return pop_locked();
    }

    std::size_t size() const {
        std::lock_guard lock(mu_);
        return q_.size();
    }
    bool empty() const { return size() == 0; }
    std::size_t capacity() const { return capacity_; }
    std::size_t max_depth() const {
        std::lock_guard lock(mu_);
        return max_depth_;
    }
    std::size_t pushed_count() const {
        std::lock_guard lock(mu_);
        return pushed_;
    }
    std::size_t popped_count() const {
        std::lock_guard lock(mu_);
        return popped_;
    }
    void reset_stats() {
        std::lock_guard lock(mu_);
        max_depth_ = 0;
        pushed_ = 0;
        popped_ = 0;
    }

private:
    T pop_locked() {
        T item = std::move(q_.front());
        q_.pop_front();
        ++popped_;
        not_full_.notify_one();
        return item;
    }

    mutable std::mutex mu_;
    std::condition_variable not_empty_;
    std::condition_variable not_full_;
    std::deque<T> q_;
    std::size_t capacity_;
    std::size_t max_depth_ = 0;
    std::size_t pushed_ = 0;
    std::size_t popped_ = 0;
};

}  // namespace parl

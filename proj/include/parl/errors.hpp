#pragma once

#include <stdexcept>
#include <string>

namespace parl {

// Invalid or inconsistent configuration values.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched lengths / layouts between related containers.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Token id outside the model vocabulary.
struct VocabError : std::runtime_error {
    explicit VocabError(const std::string& msg) : std::runtime_error(msg) {}
};

// Use of an activation handle that a later forward (or update) invalidated.
struct LifecycleError : std::runtime_error {
    explicit LifecycleError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf where a finite value is required.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Weight-sync or snapshot called outside its barrier window.
struct BarrierError : std::runtime_error {
    explicit BarrierError(const std::string& msg) : std::runtime_error(msg) {}
};

// Producer/consumer made no progress within the watchdog window.
struct StallError : std::runtime_error {
    explicit StallError(const std::string& msg) : std::runtime_error(msg) {}
};

// File read/write problems.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace parl

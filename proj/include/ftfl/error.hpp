#pragma once

#include <stdexcept>
#include <string>

namespace ftfl {

// Exit codes used by the command-line harness.
enum class ExitCode : int { ok = 0, config_error = 1, runtime_abort = 2, io_error = 3 };

/// Invalid configuration, bad arguments, or violated preconditions on inputs.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Vector/matrix shapes that do not agree.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A loss, gradient or prediction left the finite range.
struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// File missing, unreadable, or malformed.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Operation called in a state that does not allow it (e.g. predicting
/// with an untrained model, sampling an empty buffer).
struct StateError : std::logic_error {
    using std::logic_error::logic_error;
};

}  // namespace ftfl

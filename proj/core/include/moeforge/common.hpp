// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace moeforge {

/// Tensor shapes do not conform for the requested operation.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// An operation produced NaN or Inf. Non-finite values are an error
/// condition, never a silent state.
struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Invalid user-facing configuration (bad arch, plan, router settings, ...).
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Checkpoint file problems: version mismatch, truncation, checksum failure.
struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Per-rank tensor shapes differ where the All-to-All contract requires
/// them to be identical.
struct UniformShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string format_double(double v);

} // namespace moeforge

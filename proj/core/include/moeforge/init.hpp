// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "moeforge/rng.hpp"
#include "moeforge/tensor.hpp"

namespace moeforge {

/// Truncated normal initialization: every sample lies within
/// [mean - 2*std, mean + 2*std]. Deterministic under a fixed seed.
Tensor init_truncated_normal(std::vector<std::int64_t> shape, double mean, double std,
                             std::uint64_t rng_seed, bool requires_grad = true);

/// Same draw against a caller-owned stream (used when many tensors share one
/// sequentially-advancing stream, e.g. full model builds).
Tensor init_truncated_normal(std::vector<std::int64_t> shape, double mean, double std,
                             Rng& rng, bool requires_grad = true);

} // namespace moeforge

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "moeforge/checkpoint.hpp"

namespace moeforge {

/// Aggregation of Experts: builds an (E_a + E_b)-expert checkpoint from two
/// donors. Every non-expert tensor is the elementwise mean, gate matrices
/// are column-concatenated with a's columns first, and expert weights are
/// collected with a's experts at indices [0, E_a). Donors must share the
/// architecture except for num_experts.
Checkpoint aoe_merge(const Checkpoint& a, const Checkpoint& b);

/// Routed-token counts per MoE layer, counted at the gate argmax before
/// capacity filtering (so drops still count: this measures demand, not
/// admission).
struct UtilizationCounts {
    std::vector<std::vector<std::int64_t>> per_layer; // [moe_layer][expert]
    std::int64_t total_tokens = 0;
};

struct EvalBatch {
    TokenBatch src;
    TokenBatch decoder_in;
};

UtilizationCounts count_utilization(const Checkpoint& ckpt,
                                    const std::vector<EvalBatch>& batches,
                                    const RouterConfig& cfg);

void write_utilization_csv(const UtilizationCounts& counts,
                           const std::filesystem::path& path);

enum class PruneStrategy { kTopUtilization, kRandom };

/// Keeps k experts per MoE layer with their gate columns; everything else is
/// copied unchanged. Top-utilization selection is per layer (ties break to
/// the lower expert index); random selection draws one k-subset from the
/// seed and applies it to every layer. Kept experts are re-indexed [0, k)
/// preserving their original order.
Checkpoint prune_experts(const Checkpoint& ckpt, int k, PruneStrategy strategy,
                         const UtilizationCounts* counts = nullptr,
                         std::uint64_t seed = 0);

} // namespace moeforge

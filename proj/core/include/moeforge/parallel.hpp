// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "moeforge/routing.hpp"

namespace moeforge {

/// Parallelism degrees. data_parallel is derived: dp = world_size / mp.
struct ParallelPlan {
    int world_size = 1;      // N
    int expert_parallel = 1; // ep
    int model_parallel = 1;  // mp
    int zero_stage = 0;      // 0 or 2 (stage 2 partitions optimizer states and grads)
    bool offload = false;    // grads + optimizer states live in CPU memory

    int data_parallel() const { return world_size / model_parallel; }
    void validate() const;
};

enum class Device { kGpu, kCpu };

/// Mixed-precision training-state accounting, bytes per parameter:
/// fp16 params (2) + fp16 grads (2) + optimizer states (12: fp32 master
/// weights and both Adam moments). Activations are excluded; the planner
/// models parameter state only.
inline constexpr double kBytesParam = 2.0;
inline constexpr double kBytesGrad = 2.0;
inline constexpr double kBytesOptim = 12.0;

struct MemoryEstimate {
    double nonexpert_params = 0.0; // always GPU
    double expert_params = 0.0;    // always GPU
    double nonexpert_grads = 0.0;
    double expert_grads = 0.0;
    double nonexpert_optim = 0.0;
    double expert_optim = 0.0;
    Device grad_optim_device = Device::kGpu;

    double gpu_total() const;
    double cpu_total() const;
    double total() const { return gpu_total() + cpu_total(); }
    /// (grads + optimizer) / total training state; 14/16 = 87.5% when nothing
    /// is partitioned.
    double optimizer_grad_share() const;
};

/// Per-device memory for a model with the given non-expert / expert
/// parameter counts. Non-expert state is sliced by mp and (stage 2)
/// partitioned across dp; expert state is sliced by ep * mp and partitioned
/// across dp / ep. Offload retags grad + optimizer bytes as CPU.
MemoryEstimate memory_per_gpu(const ParallelPlan& plan, double nonexpert_params,
                              double expert_params);

struct MaxModelSize {
    std::int64_t max_experts = 0;
    double total_params = 0.0;
};

/// Largest expert count whose per-GPU footprint fits the budget (monotone,
/// solved by binary search). Throws ConfigError when the base model alone
/// exceeds the budget.
MaxModelSize max_model_size(const ParallelPlan& plan, double gpu_budget_bytes,
                            double base_params, double params_per_expert);

/// key=value lines or a JSON object; keys match the ParallelPlan fields.
ParallelPlan parse_plan_file(const std::filesystem::path& path);

std::string memory_report_text(const ParallelPlan& plan, const MemoryEstimate& est);
std::string memory_report_csv(const ParallelPlan& plan, const MemoryEstimate& est);

// --- expert-parallel simulation ---

struct VirtualRank {
    int rank = 0;
    std::vector<int> local_experts;
};

/// Bytes moved between rank pairs by one simulated layer step (forward and
/// reverse All-to-All). Fixed-shape accounting: the whole [E/ep, cap, d]
/// slice travels regardless of occupancy.
struct A2ATrafficLog {
    int ep = 0;
    std::vector<double> bytes; // row-major [ep, ep], diagonal zero
    double at(int from, int to) const { return bytes[static_cast<std::size_t>(from) * ep + to]; }
    double total() const;
};

struct SimResult {
    std::vector<VirtualRank> ranks;
    std::vector<Tensor> outputs; // per rank, [T, d]
    std::vector<RoutingDecision> decisions;
    A2ATrafficLog traffic;
};

/// Runs one MoE layer under expert parallelism: each rank gates its own
/// tokens (rank r uses seed derive_seed(seed, r)), exchanges fixed-shape
/// buffer slices with the expert owners, applies the local expert FFNs and
/// combines after the reverse exchange. Message order is fixed (sender rank,
/// then expert), so the result is deterministic and bit-identical to running
/// each rank's tokens through moe_layer_forward with the same per-rank seed.
SimResult simulate_expert_parallel_step(const std::vector<Tensor>& per_rank_tokens,
                                        const MoeLayerParams& params,
                                        const RouterConfig& cfg, Phase phase,
                                        std::uint64_t seed, int ep);

A2ATrafficLog a2a_traffic(const SimResult& result);

} // namespace moeforge

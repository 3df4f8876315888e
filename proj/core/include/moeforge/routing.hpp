// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "moeforge/ops.hpp"
#include "moeforge/tensor.hpp"

namespace moeforge {

enum class Phase { kTrain, kEval };

enum class AssignmentMode { kPlain, kGrouped, kRts };

struct RouterConfig {
    int num_experts = 8;
    double capacity_factor_train = 1.0;
    double capacity_factor_eval = 2.0;
    double jitter_eps = 0.01;
    double balance_coeff = 0.01;
    AssignmentMode assignment_mode = AssignmentMode::kPlain;
    int group_count = 1; // only used by kGrouped
    int top_k = 1;       // 2 is supported as an experimental extension
    std::uint64_t rng_seed = 0;

    void validate() const;
    double capacity_factor(Phase phase) const {
        return phase == Phase::kTrain ? capacity_factor_train : capacity_factor_eval;
    }
};

inline constexpr std::int32_t kDropped = -1;

/// Per-token routing outcome. Entry (t, k) lives at index t * top_k + k.
/// slot is the capacity slot inside the chosen expert, or kDropped.
struct RoutingDecision {
    int num_experts = 0;
    /// Per-expert slot count the dispatch buffers are sized with. Grouped
    /// assignment rounds this up to group_count * ceil(cap / group_count).
    int capacity = 0;
    int top_k = 1;
    std::vector<std::int32_t> expert_id;
    std::vector<std::int32_t> slot;
    std::vector<double> gate_prob;

    std::int64_t tokens() const {
        return static_cast<std::int64_t>(expert_id.size()) / top_k;
    }
    bool kept(std::int64_t token, int k = 0) const {
        return slot[token * top_k + k] != kDropped;
    }
    std::int64_t drop_count() const;
    /// Kept-token count per expert; never exceeds capacity.
    std::vector<std::int64_t> kept_per_expert() const;
};

/// Per-expert capacity: ceil(C_phase * tokens / E), floored at 1.
int capacity(std::int64_t tokens, const RouterConfig& cfg, Phase phase);

struct GateResult {
    Tensor probs;                     // [T, E] softmax, differentiable
    std::vector<std::int32_t> choice; // [T * top_k]; ties break to the lowest index
    std::vector<Tensor> gate_prob;    // per k: [T] picked probs, differentiable
};

/// Gate with multiplicative jitter on the input (train phase only): each
/// element of x is scaled by uniform noise in [1 - jitter_eps, 1 + jitter_eps]
/// before the gate matmul. The noise stream is determined by jitter_seed.
GateResult gate_forward(const Tensor& x, const Tensor& gate_w, const RouterConfig& cfg,
                        Phase phase, std::uint64_t jitter_seed);

/// Tokens scan in flattened order; each takes the next free slot of its
/// chosen expert or is dropped.
RoutingDecision assign_plain(std::span<const std::int32_t> choice, int num_experts,
                             int cap, int top_k = 1);

/// Contiguous groups run plain assignment independently with per-group
/// capacity ceil(cap / group_count). group_count must divide the token count.
RoutingDecision assign_grouped(std::span<const std::int32_t> choice, int num_experts,
                               int cap, int group_count, int top_k = 1);

/// Random Token Selection: a uniformly random permutation of token indices
/// defines the scan priority, making a token's chance of winning a slot
/// independent of its position. Deterministic under a fixed seed.
RoutingDecision assign_rts(std::span<const std::int32_t> choice, int num_experts,
                           int cap, std::uint64_t rng_seed, int top_k = 1);

/// Mode dispatch. Eval phase always uses plain assignment so that inference
/// is deterministic regardless of the configured training mode.
RoutingDecision make_assignment(std::span<const std::int32_t> choice, std::int64_t tokens,
                                const RouterConfig& cfg, Phase phase,
                                std::uint64_t rng_seed);

/// Fixed-shape buffer exchanged by the (simulated) All-to-All. Rows are
/// grouped by expert: row e * capacity + slot. Unoccupied rows are exactly
/// zero.
struct DispatchBuffer {
    Tensor data; // [E * capacity, d_model]
    int num_experts = 0;
    int capacity = 0;
    std::vector<std::uint8_t> occupancy; // [E * capacity]
};

DispatchBuffer dispatch(const Tensor& x, const RoutingDecision& decision);

/// Gathers expert outputs back to token order. Each kept route contributes
/// weights[k][t] * expert_out[row(t, k)]; tokens whose routes were all
/// dropped return their residual row unchanged.
Tensor combine(const Tensor& expert_out, const RoutingDecision& decision,
               const Tensor& residual, const std::vector<Tensor>& weights);

/// Switch-flavored balancing loss: alpha * E * sum_e f_e * pbar_e, where f_e
/// is the fraction of tokens whose first choice is e (drops included) and
/// pbar_e is the mean gate probability of e. Differentiable through pbar
/// only; f is a constant.
Tensor balance_loss(const Tensor& probs, const RoutingDecision& decision, double alpha);

/// One expert's feed-forward weights.
struct ExpertFfn {
    Tensor w1, b1, w2, b2;
};

struct MoeLayerParams {
    Tensor gate_w; // [d_model, E]
    std::vector<ExpertFfn> experts;
};

struct MoeLayerResult {
    Tensor y;
    Tensor aux_loss;
    RoutingDecision decision;
};

/// Full MoE layer: gate -> assignment -> dispatch -> per-expert FFN ->
/// combine. Top-1 combine weight is num_experts * gate_prob, which is 1 for a
/// single expert at uniform routing and keeps checkpoint aggregation exactly
/// forward-equivalent when both donors are the same model. Top-2 weights are
/// the renormalized top-2 probabilities.
///
/// residual chooses what dropped tokens return; it defaults to x. Passing a
/// zero tensor yields the "contribution" form used inside transformer blocks.
MoeLayerResult moe_layer_forward(const Tensor& x, const MoeLayerParams& params,
                                 const RouterConfig& cfg, Phase phase,
                                 std::uint64_t seed,
                                 const Tensor* residual = nullptr);

} // namespace moeforge

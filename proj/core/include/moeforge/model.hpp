// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "moeforge/routing.hpp"
#include "moeforge/tensor.hpp"

namespace moeforge {

/// Encoder-decoder architecture. MoE feed-forwards replace the dense FFN in
/// every moe_every-th layer (1-based even indices for the default stride 2)
/// of both stacks.
struct ArchConfig {
    std::int64_t vocab = 250000;
    std::int64_t d_model = 1024;
    std::int64_t ffn_dim = 4096;
    int enc_layers = 24;
    int dec_layers = 12;
    int heads = 16;
    int num_experts = 64;
    int moe_every = 2;
    bool tied_embeddings = true;

    void validate() const;
    bool is_moe_layer(int layer_index_1based) const {
        return layer_index_1based % moe_every == 0;
    }
    int num_moe_layers() const {
        return enc_layers / moe_every + dec_layers / moe_every;
    }

    static ArchConfig large(int num_experts);
    static ArchConfig small(int num_experts);
    static ArchConfig toy(std::int64_t vocab, int num_experts);
};

enum class TensorRole { kNonExpert, kExpert, kGate };

struct RoleTag {
    TensorRole role = TensorRole::kNonExpert;
    int moe_layer = -1; // global MoE layer ordinal (encoder first, then decoder)
    int expert = -1;    // only for kExpert
};

enum class InitKind { kEmbedding, kMatrix, kZeros, kOnes };

struct TensorSpec {
    std::string name;
    RoleTag tag;
    std::vector<std::int64_t> shape;
    InitKind init = InitKind::kMatrix;
};

/// Full tensor enumeration for an architecture, in build order. This is the
/// single source of truth for parameter counting, initialization and the
/// checkpoint layout.
std::vector<TensorSpec> enumerate_param_specs(const ArchConfig& arch);

struct ParamCount {
    std::int64_t total = 0;
    std::int64_t non_expert = 0;
    std::int64_t expert = 0;
    std::int64_t gate = 0;
};

ParamCount param_count(const ArchConfig& arch);

struct ModelParams {
    ArchConfig arch;
    std::vector<TensorSpec> specs;
    std::vector<Tensor> tensors; // aligned with specs
    std::unordered_map<std::string, std::size_t> index;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    std::vector<Tensor> trainable() const { return tensors; }
    void zero_grad();
};

/// Draws every weight with truncated-normal initialization from a single
/// seed-derived stream: std 0.02 for embeddings, sqrt(2 / (fan_in + fan_out))
/// for matrices. Biases start at zero, layernorm gains at one.
ModelParams build_model(const ArchConfig& arch, std::uint64_t seed);

/// A batch of variable-length sequences stored flat; offsets has B+1 entries.
struct TokenBatch {
    std::vector<std::int32_t> tokens;
    std::vector<std::int64_t> offsets{0};

    void add(const std::vector<std::int32_t>& seq);
    std::int64_t size() const { return static_cast<std::int64_t>(offsets.size()) - 1; }
    std::int64_t total_tokens() const { return static_cast<std::int64_t>(tokens.size()); }
};

struct ForwardResult {
    Tensor logits; // [total target tokens, V]
    Tensor aux_loss;
    std::vector<RoutingDecision> decisions; // one per MoE layer
};

/// Teacher-forced forward pass. decoder_in holds the shifted target
/// sequences. Routing decisions are returned per MoE layer in global order.
ForwardResult forward(const ModelParams& model, const TokenBatch& src,
                      const TokenBatch& decoder_in, const RouterConfig& cfg,
                      Phase phase, std::uint64_t seed);

/// Greedy decoding with eval-phase routing. Returns the generated ids,
/// excluding bos/eos. Stops at eos_id or max_len.
std::vector<std::int32_t> generate(const ModelParams& model,
                                   const std::vector<std::int32_t>& src,
                                   std::int64_t max_len, const RouterConfig& cfg,
                                   std::int32_t bos_id, std::int32_t eos_id);

} // namespace moeforge

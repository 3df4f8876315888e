// SPDX-License-Identifier: Apache-2.0
#include "moeforge/surgery.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <regex>

#include "moeforge/common.hpp"
#include "moeforge/rng.hpp"

namespace moeforge {

namespace {

void require_merge_compatible(const ArchConfig& a, const ArchConfig& b) {
    const bool same = a.vocab == b.vocab && a.d_model == b.d_model &&
                      a.ffn_dim == b.ffn_dim && a.enc_layers == b.enc_layers &&
                      a.dec_layers == b.dec_layers && a.heads == b.heads &&
                      a.moe_every == b.moe_every && a.tied_embeddings == b.tied_embeddings;
    if (!same) {
        throw ConfigError("aoe_merge: donor architectures differ on non-expert shapes");
    }
}

/// "enc.3.moe.expert7.w1" -> ("enc.3.moe", 7, ".w1")
struct ExpertName {
    std::string layer_prefix;
    int expert = -1;
    std::string suffix;
};

ExpertName split_expert_name(const std::string& name) {
    static const std::regex re(R"((.*\.moe)\.expert(\d+)(\..+))");
    std::smatch m;
    if (!std::regex_match(name, m, re)) {
        throw CheckpointError("surgery: unexpected expert tensor name " + name);
    }
    return {m[1].str(), std::stoi(m[2].str()), m[3].str()};
}

} // namespace

Checkpoint aoe_merge(const Checkpoint& a, const Checkpoint& b) {
    require_merge_compatible(a.arch, b.arch);
    const int e_a = a.arch.num_experts;
    const int e_b = b.arch.num_experts;
    const std::int64_t d = a.arch.d_model;

    Checkpoint merged;
    merged.arch = a.arch;
    merged.arch.num_experts = e_a + e_b;

    for (const TensorSpec& spec : enumerate_param_specs(merged.arch)) {
        TensorRecord rec;
        rec.name = spec.name;
        rec.tag = spec.tag;
        rec.shape = spec.shape;
        switch (spec.tag.role) {
        case TensorRole::kNonExpert: {
            const TensorRecord& ra = a.at(spec.name);
            const TensorRecord& rb = b.at(spec.name);
            if (ra.shape != rb.shape) {
                throw ConfigError("aoe_merge: non-expert shape mismatch on " + spec.name);
            }
            rec.data.resize(ra.data.size());
            for (std::size_t i = 0; i < rec.data.size(); ++i) {
                rec.data[i] = (ra.data[i] + rb.data[i]) / 2.0;
            }
            break;
        }
        case TensorRole::kGate: {
            // Column concatenation: [d, E_a] | [d, E_b] -> [d, E_a + E_b].
            const TensorRecord& ga = a.at(spec.name);
            const TensorRecord& gb = b.at(spec.name);
            rec.data.resize(static_cast<std::size_t>(d) * (e_a + e_b));
            for (std::int64_t row = 0; row < d; ++row) {
                std::copy_n(ga.data.begin() + row * e_a, e_a,
                            rec.data.begin() + row * (e_a + e_b));
                std::copy_n(gb.data.begin() + row * e_b, e_b,
                            rec.data.begin() + row * (e_a + e_b) + e_a);
            }
            break;
        }
        case TensorRole::kExpert: {
            const ExpertName parts = split_expert_name(spec.name);
            const bool from_a = parts.expert < e_a;
            const int src_idx = from_a ? parts.expert : parts.expert - e_a;
            const std::string src_name =
                parts.layer_prefix + ".expert" + std::to_string(src_idx) + parts.suffix;
            rec.data = (from_a ? a.at(src_name) : b.at(src_name)).data;
            break;
        }
        }
        merged.tensors.push_back(std::move(rec));
    }
    return merged;
}

UtilizationCounts count_utilization(const Checkpoint& ckpt,
                                    const std::vector<EvalBatch>& batches,
                                    const RouterConfig& cfg) {
    ModelParams model = model_from_checkpoint(ckpt);
    RouterConfig eval_cfg = cfg;
    eval_cfg.num_experts = ckpt.arch.num_experts;

    UtilizationCounts counts;
    counts.per_layer.assign(static_cast<std::size_t>(ckpt.arch.num_moe_layers()),
                            std::vector<std::int64_t>(static_cast<std::size_t>(ckpt.arch.num_experts), 0));
    for (const EvalBatch& batch : batches) {
        ForwardResult fwd = forward(model, batch.src, batch.decoder_in, eval_cfg,
                                    Phase::kEval, 0);
        counts.total_tokens += batch.src.total_tokens() + batch.decoder_in.total_tokens();
        for (std::size_t layer = 0; layer < fwd.decisions.size(); ++layer) {
            const RoutingDecision& dec = fwd.decisions[layer];
            for (std::int64_t t = 0; t < dec.tokens(); ++t) {
                ++counts.per_layer[layer][static_cast<std::size_t>(dec.expert_id[t * dec.top_k])];
            }
        }
    }
    return counts;
}

void write_utilization_csv(const UtilizationCounts& counts,
                           const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    out << "layer,expert,count\n";
    for (std::size_t layer = 0; layer < counts.per_layer.size(); ++layer) {
        for (std::size_t e = 0; e < counts.per_layer[layer].size(); ++e) {
            out << layer << "," << e << "," << counts.per_layer[layer][e] << "\n";
        }
    }
}

Checkpoint prune_experts(const Checkpoint& ckpt, int k, PruneStrategy strategy,
                         const UtilizationCounts* counts, std::uint64_t seed) {
    const int e_full = ckpt.arch.num_experts;
    if (k < 1 || k > e_full) {
        throw ConfigError("prune_experts: k must be in [1, num_experts]");
    }
    const int num_moe_layers = ckpt.arch.num_moe_layers();

    // Kept expert indices per MoE layer, ascending (original order preserved).
    std::vector<std::vector<int>> kept(static_cast<std::size_t>(num_moe_layers));
    if (strategy == PruneStrategy::kTopUtilization) {
        if (counts == nullptr ||
            static_cast<int>(counts->per_layer.size()) != num_moe_layers) {
            throw ConfigError("prune_experts: utilization counts missing or mismatched");
        }
        for (int layer = 0; layer < num_moe_layers; ++layer) {
            const auto& c = counts->per_layer[static_cast<std::size_t>(layer)];
            if (static_cast<int>(c.size()) != e_full) {
                throw ConfigError("prune_experts: counts do not cover all experts");
            }
            std::vector<int> order(static_cast<std::size_t>(e_full));
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
                return c[static_cast<std::size_t>(x)] > c[static_cast<std::size_t>(y)];
            });
            order.resize(static_cast<std::size_t>(k));
            std::sort(order.begin(), order.end());
            kept[static_cast<std::size_t>(layer)] = std::move(order);
        }
    } else {
        Rng rng(seed);
        auto perm = rng.permutation(static_cast<std::size_t>(e_full));
        std::vector<int> set(perm.begin(), perm.begin() + k);
        std::sort(set.begin(), set.end());
        for (auto& layer_kept : kept) {
            layer_kept = set;
        }
    }

    Checkpoint pruned;
    pruned.arch = ckpt.arch;
    pruned.arch.num_experts = k;
    const std::int64_t d = ckpt.arch.d_model;

    for (const TensorSpec& spec : enumerate_param_specs(pruned.arch)) {
        TensorRecord rec;
        rec.name = spec.name;
        rec.tag = spec.tag;
        rec.shape = spec.shape;
        switch (spec.tag.role) {
        case TensorRole::kNonExpert:
            rec.data = ckpt.at(spec.name).data;
            break;
        case TensorRole::kGate: {
            const auto& layer_kept = kept[static_cast<std::size_t>(spec.tag.moe_layer)];
            const TensorRecord& full = ckpt.at(spec.name);
            rec.data.resize(static_cast<std::size_t>(d) * k);
            for (std::int64_t row = 0; row < d; ++row) {
                for (int j = 0; j < k; ++j) {
                    rec.data[row * k + j] = full.data[row * e_full + layer_kept[static_cast<std::size_t>(j)]];
                }
            }
            break;
        }
        case TensorRole::kExpert: {
            const ExpertName parts = split_expert_name(spec.name);
            const auto& layer_kept = kept[static_cast<std::size_t>(spec.tag.moe_layer)];
            const int src_idx = layer_kept[static_cast<std::size_t>(parts.expert)];
            const std::string src_name =
                parts.layer_prefix + ".expert" + std::to_string(src_idx) + parts.suffix;
            rec.data = ckpt.at(src_name).data;
            break;
        }
        }
        pruned.tensors.push_back(std::move(rec));
    }
    return pruned;
}

} // namespace moeforge

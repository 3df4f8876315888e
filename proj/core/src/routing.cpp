// SPDX-License-Identifier: Apache-2.0
#include "moeforge/routing.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "moeforge/common.hpp"
#include "moeforge/rng.hpp"

namespace moeforge {

void RouterConfig::validate() const {
    if (num_experts < 1) throw ConfigError("router: num_experts must be >= 1");
    if (capacity_factor_train <= 0.0 || capacity_factor_eval <= 0.0) {
        throw ConfigError("router: capacity factors must be positive");
    }
    if (balance_coeff < 0.0) throw ConfigError("router: balance_coeff must be >= 0");
    if (jitter_eps < 0.0) throw ConfigError("router: jitter_eps must be >= 0");
    if (group_count < 1) throw ConfigError("router: group_count must be >= 1");
    if (top_k != 1 && top_k != 2) throw ConfigError("router: top_k must be 1 or 2");
    if (top_k > num_experts) throw ConfigError("router: top_k exceeds num_experts");
}

std::int64_t RoutingDecision::drop_count() const {
    std::int64_t n = 0;
    for (std::int32_t s : slot) {
        if (s == kDropped) ++n;
    }
    return n;
}

std::vector<std::int64_t> RoutingDecision::kept_per_expert() const {
    std::vector<std::int64_t> counts(static_cast<std::size_t>(num_experts), 0);
    for (std::size_t i = 0; i < slot.size(); ++i) {
        if (slot[i] != kDropped) {
            ++counts[static_cast<std::size_t>(expert_id[i])];
        }
    }
    return counts;
}

int capacity(std::int64_t tokens, const RouterConfig& cfg, Phase phase) {
    if (tokens < 1) throw ConfigError("capacity: token count must be >= 1");
    cfg.validate();
    const double c = cfg.capacity_factor(phase) * static_cast<double>(tokens) /
                     static_cast<double>(cfg.num_experts);
    return std::max<int>(1, static_cast<int>(std::ceil(c)));
}

GateResult gate_forward(const Tensor& x, const Tensor& gate_w, const RouterConfig& cfg,
                        Phase phase, std::uint64_t jitter_seed) {
    cfg.validate();
    if (x.shape().size() != 2 || gate_w.shape().size() != 2 ||
        x.shape()[1] != gate_w.shape()[0] ||
        gate_w.shape()[1] != cfg.num_experts) {
        throw ShapeError("gate_forward: x [T,d] and gate_w [d,E] required");
    }
    const std::int64_t t_count = x.shape()[0];
    const std::int64_t e_count = cfg.num_experts;

    Tensor gate_in = x;
    if (phase == Phase::kTrain && cfg.jitter_eps > 0.0) {
        Rng rng(jitter_seed);
        std::vector<double> noise(static_cast<std::size_t>(x.numel()));
        for (double& v : noise) {
            v = rng.uniform(1.0 - cfg.jitter_eps, 1.0 + cfg.jitter_eps);
        }
        gate_in = mul(x, Tensor::from_data(x.shape(), std::move(noise)));
    }
    Tensor probs = softmax_rows(matmul(gate_in, gate_w));

    GateResult out;
    out.probs = probs;
    out.choice.resize(static_cast<std::size_t>(t_count * cfg.top_k));
    std::span<const double> p = probs.data();
    for (std::int64_t t = 0; t < t_count; ++t) {
        const double* row = p.data() + t * e_count;
        std::int32_t best = 0;
        for (std::int64_t e = 1; e < e_count; ++e) {
            if (row[e] > row[best]) best = static_cast<std::int32_t>(e);
        }
        out.choice[static_cast<std::size_t>(t * cfg.top_k)] = best;
        if (cfg.top_k == 2) {
            std::int32_t second = best == 0 ? 1 : 0;
            for (std::int64_t e = 0; e < e_count; ++e) {
                if (e == best) continue;
                if (row[e] > row[second]) second = static_cast<std::int32_t>(e);
            }
            out.choice[static_cast<std::size_t>(t * cfg.top_k + 1)] = second;
        }
    }
    for (int k = 0; k < cfg.top_k; ++k) {
        std::vector<std::int32_t> kth(static_cast<std::size_t>(t_count));
        for (std::int64_t t = 0; t < t_count; ++t) {
            kth[static_cast<std::size_t>(t)] = out.choice[static_cast<std::size_t>(t * cfg.top_k + k)];
        }
        out.gate_prob.push_back(pick_per_row(probs, kth));
    }
    return out;
}

namespace {

void check_choices(std::span<const std::int32_t> choice, int num_experts) {
    for (std::int32_t c : choice) {
        if (c < 0 || c >= num_experts) {
            throw ConfigError("assignment: choice out of expert range");
        }
    }
}

/// Core scan: visits (token, k) pairs in the given token order, k-major
/// (all first choices before all second choices), granting each its
/// expert's next free slot within [slot_base, slot_base + slot_span).
RoutingDecision scan_assign(std::span<const std::int32_t> choice, int num_experts,
                            int top_k, int capacity_total,
                            std::span<const std::uint32_t> token_order,
                            std::int64_t token_begin, std::int64_t token_end,
                            int slot_base, int slot_span, RoutingDecision* into) {
    RoutingDecision local;
    RoutingDecision& dec = into ? *into : local;
    if (!into) {
        const std::int64_t t_count = static_cast<std::int64_t>(choice.size()) / top_k;
        dec.num_experts = num_experts;
        dec.capacity = capacity_total;
        dec.top_k = top_k;
        dec.expert_id.assign(choice.begin(), choice.end());
        dec.slot.assign(static_cast<std::size_t>(t_count) * top_k, kDropped);
        dec.gate_prob.assign(static_cast<std::size_t>(t_count) * top_k, 0.0);
    }
    std::vector<int> used(static_cast<std::size_t>(num_experts), 0);
    for (int k = 0; k < top_k; ++k) {
        for (std::int64_t i = token_begin; i < token_end; ++i) {
            const std::int64_t t = token_order.empty() ? i : token_order[static_cast<std::size_t>(i)];
            const std::size_t idx = static_cast<std::size_t>(t * top_k + k);
            const std::int32_t e = choice[idx];
            if (used[static_cast<std::size_t>(e)] < slot_span) {
                dec.slot[idx] = static_cast<std::int32_t>(slot_base + used[static_cast<std::size_t>(e)]);
                ++used[static_cast<std::size_t>(e)];
            }
        }
    }
    return dec;
}

} // namespace

RoutingDecision assign_plain(std::span<const std::int32_t> choice, int num_experts,
                             int cap, int top_k) {
    check_choices(choice, num_experts);
    return scan_assign(choice, num_experts, top_k, cap, {}, 0,
                       static_cast<std::int64_t>(choice.size()) / top_k, 0, cap, nullptr);
}

RoutingDecision assign_grouped(std::span<const std::int32_t> choice, int num_experts,
                               int cap, int group_count, int top_k) {
    check_choices(choice, num_experts);
    const std::int64_t t_count = static_cast<std::int64_t>(choice.size()) / top_k;
    if (group_count < 1 || t_count % group_count != 0) {
        throw ConfigError("assign_grouped: group_count must divide the token count");
    }
    const int group_cap = static_cast<int>(
        std::ceil(static_cast<double>(cap) / static_cast<double>(group_count)));
    RoutingDecision dec;
    dec.num_experts = num_experts;
    dec.capacity = group_cap * group_count;
    dec.top_k = top_k;
    dec.expert_id.assign(choice.begin(), choice.end());
    dec.slot.assign(static_cast<std::size_t>(t_count) * top_k, kDropped);
    dec.gate_prob.assign(static_cast<std::size_t>(t_count) * top_k, 0.0);
    const std::int64_t group_len = t_count / group_count;
    for (int g = 0; g < group_count; ++g) {
        scan_assign(choice, num_experts, top_k, dec.capacity, {}, g * group_len,
                    (g + 1) * group_len, g * group_cap, group_cap, &dec);
    }
    return dec;
}

RoutingDecision assign_rts(std::span<const std::int32_t> choice, int num_experts,
                           int cap, std::uint64_t rng_seed, int top_k) {
    check_choices(choice, num_experts);
    const std::int64_t t_count = static_cast<std::int64_t>(choice.size()) / top_k;
    Rng rng(rng_seed);
    const std::vector<std::uint32_t> order = rng.permutation(static_cast<std::size_t>(t_count));
    return scan_assign(choice, num_experts, top_k, cap, order, 0, t_count, 0, cap, nullptr);
}

RoutingDecision make_assignment(std::span<const std::int32_t> choice, std::int64_t tokens,
                                const RouterConfig& cfg, Phase phase,
                                std::uint64_t rng_seed) {
    const int cap = capacity(tokens, cfg, phase);
    // RTS randomness at inference would make evaluation non-deterministic.
    if (phase == Phase::kEval) {
        return assign_plain(choice, cfg.num_experts, cap, cfg.top_k);
    }
    switch (cfg.assignment_mode) {
    case AssignmentMode::kPlain:
        return assign_plain(choice, cfg.num_experts, cap, cfg.top_k);
    case AssignmentMode::kGrouped:
        return assign_grouped(choice, cfg.num_experts, cap, cfg.group_count, cfg.top_k);
    case AssignmentMode::kRts:
        return assign_rts(choice, cfg.num_experts, cap, rng_seed, cfg.top_k);
    }
    throw ConfigError("make_assignment: unknown mode");
}

DispatchBuffer dispatch(const Tensor& x, const RoutingDecision& decision) {
    if (x.shape().size() != 2 || x.shape()[0] != decision.tokens()) {
        throw ShapeError("dispatch: x rows must match decision tokens");
    }
    const std::int64_t d = x.shape()[1];
    const std::int64_t rows = static_cast<std::int64_t>(decision.num_experts) * decision.capacity;

    std::vector<double> buf(static_cast<std::size_t>(rows * d), 0.0);
    std::vector<std::uint8_t> occupancy(static_cast<std::size_t>(rows), 0);
    struct Placement {
        std::int64_t token;
        std::int64_t row;
    };
    std::vector<Placement> placements;
    for (std::int64_t t = 0; t < decision.tokens(); ++t) {
        for (int k = 0; k < decision.top_k; ++k) {
            const std::size_t idx = static_cast<std::size_t>(t * decision.top_k + k);
            if (decision.slot[idx] == kDropped) continue;
            const std::int64_t row =
                static_cast<std::int64_t>(decision.expert_id[idx]) * decision.capacity +
                decision.slot[idx];
            if (row < 0 || row >= rows) {
                throw ShapeError("dispatch: slot out of range");
            }
            std::memcpy(buf.data() + row * d, x.data().data() + t * d,
                        static_cast<std::size_t>(d) * sizeof(double));
            occupancy[static_cast<std::size_t>(row)] = 1;
            placements.push_back({t, row});
        }
    }
    auto xn = x.node_ptr();
    DispatchBuffer out;
    out.num_experts = decision.num_experts;
    out.capacity = decision.capacity;
    out.occupancy = std::move(occupancy);
    out.data = Tensor::from_op(
        {rows, d}, std::move(buf), {x},
        [xn, d, placements = std::move(placements)](Tensor::Node& self) {
            if (!xn->requires_grad) return;
            auto g = xn->ensure_grad();
            for (const auto& pl : placements) {
                for (std::int64_t j = 0; j < d; ++j) {
                    g[pl.token * d + j] += self.grad[pl.row * d + j];
                }
            }
        },
        "dispatch");
    return out;
}

Tensor combine(const Tensor& expert_out, const RoutingDecision& decision,
               const Tensor& residual, const std::vector<Tensor>& weights) {
    const std::int64_t t_count = decision.tokens();
    const std::int64_t d = expert_out.shape().size() == 2 ? expert_out.shape()[1] : -1;
    const std::int64_t rows = static_cast<std::int64_t>(decision.num_experts) * decision.capacity;
    if (d <= 0 || expert_out.shape()[0] != rows) {
        throw ShapeError("combine: expert_out must be [E*capacity, d]");
    }
    if (residual.shape().size() != 2 || residual.shape()[0] != t_count ||
        residual.shape()[1] != d) {
        throw ShapeError("combine: residual must be [T, d]");
    }
    if (static_cast<int>(weights.size()) != decision.top_k) {
        throw ShapeError("combine: one weight tensor per route required");
    }
    for (const Tensor& w : weights) {
        if (w.numel() != t_count) {
            throw ShapeError("combine: weight tensor must have one entry per token");
        }
    }

    std::vector<double> out(static_cast<std::size_t>(t_count * d), 0.0);
    for (std::int64_t t = 0; t < t_count; ++t) {
        bool any_kept = false;
        for (int k = 0; k < decision.top_k; ++k) {
            const std::size_t idx = static_cast<std::size_t>(t * decision.top_k + k);
            if (decision.slot[idx] == kDropped) continue;
            any_kept = true;
            const std::int64_t row =
                static_cast<std::int64_t>(decision.expert_id[idx]) * decision.capacity +
                decision.slot[idx];
            const double w = weights[static_cast<std::size_t>(k)].data()[t];
            for (std::int64_t j = 0; j < d; ++j) {
                out[t * d + j] += w * expert_out.data()[row * d + j];
            }
        }
        if (!any_kept) {
            std::memcpy(out.data() + t * d, residual.data().data() + t * d,
                        static_cast<std::size_t>(d) * sizeof(double));
        }
    }

    std::vector<Tensor> inputs = {expert_out, residual};
    inputs.insert(inputs.end(), weights.begin(), weights.end());
    auto en = expert_out.node_ptr();
    auto rn = residual.node_ptr();
    std::vector<std::shared_ptr<Tensor::Node>> wn;
    for (const Tensor& w : weights) {
        wn.push_back(w.node_ptr());
    }
    RoutingDecision dec = decision;
    return Tensor::from_op(
        {t_count, d}, std::move(out), std::move(inputs),
        [en, rn, wn = std::move(wn), dec = std::move(dec), d](Tensor::Node& self) {
            const std::int64_t t_count = dec.tokens();
            for (std::int64_t t = 0; t < t_count; ++t) {
                bool any_kept = false;
                for (int k = 0; k < dec.top_k; ++k) {
                    const std::size_t idx = static_cast<std::size_t>(t * dec.top_k + k);
                    if (dec.slot[idx] == kDropped) continue;
                    any_kept = true;
                    const std::int64_t row =
                        static_cast<std::int64_t>(dec.expert_id[idx]) * dec.capacity +
                        dec.slot[idx];
                    const double w = wn[static_cast<std::size_t>(k)]->value[static_cast<std::size_t>(t)];
                    if (en->requires_grad) {
                        auto g = en->ensure_grad();
                        for (std::int64_t j = 0; j < d; ++j) {
                            g[row * d + j] += w * self.grad[t * d + j];
                        }
                    }
                    if (wn[static_cast<std::size_t>(k)]->requires_grad) {
                        double dot = 0.0;
                        for (std::int64_t j = 0; j < d; ++j) {
                            dot += self.grad[t * d + j] * en->value[row * d + j];
                        }
                        wn[static_cast<std::size_t>(k)]->ensure_grad()[static_cast<std::size_t>(t)] += dot;
                    }
                }
                if (!any_kept && rn->requires_grad) {
                    auto g = rn->ensure_grad();
                    for (std::int64_t j = 0; j < d; ++j) {
                        g[t * d + j] += self.grad[t * d + j];
                    }
                }
            }
        },
        "combine");
}

Tensor balance_loss(const Tensor& probs, const RoutingDecision& decision, double alpha) {
    if (probs.shape().size() != 2 || probs.shape()[0] != decision.tokens() ||
        probs.shape()[1] != decision.num_experts) {
        throw ShapeError("balance_loss: probs must be [T, E]");
    }
    const std::int64_t t_count = probs.shape()[0];
    const std::int64_t e_count = probs.shape()[1];
    for (std::int64_t t = 0; t < t_count; ++t) {
        double s = 0.0;
        for (std::int64_t e = 0; e < e_count; ++e) {
            s += probs.data()[t * e_count + e];
        }
        if (std::abs(s - 1.0) > 1e-9) {
            throw std::invalid_argument("balance_loss: probs rows must sum to 1");
        }
    }
    // f_e counts first choices, drops included.
    std::vector<double> f(static_cast<std::size_t>(e_count), 0.0);
    for (std::int64_t t = 0; t < t_count; ++t) {
        f[static_cast<std::size_t>(decision.expert_id[t * decision.top_k])] += 1.0;
    }
    const double coeff = alpha * static_cast<double>(e_count) / static_cast<double>(t_count);
    for (double& v : f) {
        v *= coeff;
    }
    return dot_constant(mean_cols(probs), f);
}

MoeLayerResult moe_layer_forward(const Tensor& x, const MoeLayerParams& params,
                                 const RouterConfig& cfg, Phase phase,
                                 std::uint64_t seed, const Tensor* residual) {
    cfg.validate();
    if (static_cast<int>(params.experts.size()) != cfg.num_experts) {
        throw ShapeError("moe_layer_forward: expert count does not match config");
    }
    const std::int64_t t_count = x.shape()[0];

    GateResult gate = gate_forward(x, params.gate_w, cfg, phase,
                                   Rng::derive_seed(seed, "jitter"));
    RoutingDecision decision = make_assignment(gate.choice, t_count, cfg, phase,
                                               Rng::derive_seed(seed, "assign"));
    for (std::int64_t t = 0; t < t_count; ++t) {
        for (int k = 0; k < cfg.top_k; ++k) {
            decision.gate_prob[static_cast<std::size_t>(t * cfg.top_k + k)] =
                gate.gate_prob[static_cast<std::size_t>(k)].data()[t];
        }
    }

    DispatchBuffer buf = dispatch(x, decision);
    std::vector<Tensor> outs;
    outs.reserve(params.experts.size());
    for (int e = 0; e < cfg.num_experts; ++e) {
        const ExpertFfn& ffn = params.experts[static_cast<std::size_t>(e)];
        Tensor rows = slice_rows(buf.data, static_cast<std::int64_t>(e) * decision.capacity,
                                 decision.capacity);
        Tensor h = relu(add_bias(matmul(rows, ffn.w1), ffn.b1));
        outs.push_back(add_bias(matmul(h, ffn.w2), ffn.b2));
    }
    Tensor expert_out = concat_rows(outs);

    std::vector<Tensor> weights;
    if (cfg.top_k == 1) {
        weights.push_back(scale(gate.gate_prob[0], static_cast<double>(cfg.num_experts)));
    } else {
        // Renormalized top-2 probabilities (experimental mode).
        Tensor total = add(gate.gate_prob[0], gate.gate_prob[1]);
        for (int k = 0; k < 2; ++k) {
            weights.push_back(div_elem(gate.gate_prob[static_cast<std::size_t>(k)], total));
        }
    }

    MoeLayerResult result;
    result.aux_loss = balance_loss(gate.probs, decision, cfg.balance_coeff);
    result.y = combine(expert_out, decision, residual ? *residual : x, weights);
    result.decision = std::move(decision);
    return result;
}

} // namespace moeforge

// SPDX-License-Identifier: Apache-2.0
#include "moeforge/model.hpp"

#include <cmath>

#include "moeforge/common.hpp"
#include "moeforge/init.hpp"
#include "moeforge/rng.hpp"

namespace moeforge {

void ArchConfig::validate() const {
    if (vocab < 1) throw ConfigError("arch: vocab must be >= 1");
    if (d_model < 1 || ffn_dim < 1) throw ConfigError("arch: dimensions must be >= 1");
    if (heads < 1 || d_model % heads != 0) {
        throw ConfigError("arch: d_model must be divisible by heads");
    }
    if (enc_layers < 1 || dec_layers < 1) throw ConfigError("arch: layer counts must be >= 1");
    if (moe_every < 1) throw ConfigError("arch: moe_every must be >= 1");
    if (num_experts < 1) throw ConfigError("arch: num_experts must be >= 1");
}

ArchConfig ArchConfig::large(int num_experts) {
    ArchConfig a;
    a.vocab = 250000;
    a.d_model = 1024;
    a.ffn_dim = 4096;
    a.enc_layers = 24;
    a.dec_layers = 12;
    a.heads = 16;
    a.num_experts = num_experts;
    return a;
}

ArchConfig ArchConfig::small(int num_experts) {
    ArchConfig a;
    a.vocab = 250000;
    a.d_model = 768;
    a.ffn_dim = 3072;
    a.enc_layers = 12;
    a.dec_layers = 6;
    a.heads = 12;
    a.num_experts = num_experts;
    return a;
}

ArchConfig ArchConfig::toy(std::int64_t vocab, int num_experts) {
    ArchConfig a;
    a.vocab = vocab;
    a.d_model = 32;
    a.ffn_dim = 64;
    a.enc_layers = 2;
    a.dec_layers = 2;
    a.heads = 4;
    a.num_experts = num_experts;
    return a;
}

namespace {

void push_layernorm(std::vector<TensorSpec>& specs, const std::string& prefix,
                    std::int64_t d) {
    specs.push_back({prefix + ".gamma", {}, {d}, InitKind::kOnes});
    specs.push_back({prefix + ".beta", {}, {d}, InitKind::kZeros});
}

void push_attention(std::vector<TensorSpec>& specs, const std::string& prefix,
                    std::int64_t d) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
        specs.push_back({prefix + "." + w, {}, {d, d}, InitKind::kMatrix});
    }
    for (const char* b : {"bq", "bk", "bv", "bo"}) {
        specs.push_back({prefix + "." + b, {}, {d}, InitKind::kZeros});
    }
}

void push_ffn(std::vector<TensorSpec>& specs, const std::string& prefix, RoleTag tag,
              std::int64_t d, std::int64_t f) {
    specs.push_back({prefix + ".w1", tag, {d, f}, InitKind::kMatrix});
    specs.push_back({prefix + ".b1", tag, {f}, InitKind::kZeros});
    specs.push_back({prefix + ".w2", tag, {f, d}, InitKind::kMatrix});
    specs.push_back({prefix + ".b2", tag, {d}, InitKind::kZeros});
}

void push_ffn_or_moe(std::vector<TensorSpec>& specs, const ArchConfig& arch,
                     const std::string& layer_prefix, int layer_1based,
                     int& moe_ordinal) {
    if (arch.is_moe_layer(layer_1based)) {
        const int moe_layer = moe_ordinal++;
        specs.push_back({layer_prefix + ".moe.gate",
                         {TensorRole::kGate, moe_layer, -1},
                         {arch.d_model, arch.num_experts},
                         InitKind::kMatrix});
        for (int e = 0; e < arch.num_experts; ++e) {
            push_ffn(specs, layer_prefix + ".moe.expert" + std::to_string(e),
                     {TensorRole::kExpert, moe_layer, e}, arch.d_model, arch.ffn_dim);
        }
    } else {
        push_ffn(specs, layer_prefix + ".ffn", {}, arch.d_model, arch.ffn_dim);
    }
}

} // namespace

std::vector<TensorSpec> enumerate_param_specs(const ArchConfig& arch) {
    arch.validate();
    std::vector<TensorSpec> specs;
    const std::int64_t d = arch.d_model;

    specs.push_back({"embedding", {}, {arch.vocab, d}, InitKind::kEmbedding});
    if (!arch.tied_embeddings) {
        specs.push_back({"embedding.decoder", {}, {arch.vocab, d}, InitKind::kEmbedding});
        specs.push_back({"embedding.output", {}, {arch.vocab, d}, InitKind::kEmbedding});
    }

    int moe_ordinal = 0;
    for (int i = 0; i < arch.enc_layers; ++i) {
        const std::string p = "enc." + std::to_string(i);
        push_layernorm(specs, p + ".ln1", d);
        push_attention(specs, p + ".attn", d);
        push_layernorm(specs, p + ".ln2", d);
        push_ffn_or_moe(specs, arch, p, i + 1, moe_ordinal);
    }
    push_layernorm(specs, "enc.final_ln", d);

    for (int i = 0; i < arch.dec_layers; ++i) {
        const std::string p = "dec." + std::to_string(i);
        push_layernorm(specs, p + ".ln1", d);
        push_attention(specs, p + ".self_attn", d);
        push_layernorm(specs, p + ".ln2", d);
        push_attention(specs, p + ".cross_attn", d);
        push_layernorm(specs, p + ".ln3", d);
        push_ffn_or_moe(specs, arch, p, i + 1, moe_ordinal);
    }
    push_layernorm(specs, "dec.final_ln", d);
    return specs;
}

ParamCount param_count(const ArchConfig& arch) {
    ParamCount count;
    for (const TensorSpec& spec : enumerate_param_specs(arch)) {
        const std::int64_t n = shape_numel(spec.shape);
        count.total += n;
        switch (spec.tag.role) {
        case TensorRole::kNonExpert: count.non_expert += n; break;
        case TensorRole::kExpert: count.expert += n; break;
        case TensorRole::kGate: count.gate += n; break;
        }
    }
    return count;
}

Tensor& ModelParams::at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) {
        throw ConfigError("model: unknown tensor " + name);
    }
    return tensors[it->second];
}

const Tensor& ModelParams::at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) {
        throw ConfigError("model: unknown tensor " + name);
    }
    return tensors[it->second];
}

void ModelParams::zero_grad() {
    for (Tensor& t : tensors) {
        t.zero_grad();
    }
}

ModelParams build_model(const ArchConfig& arch, std::uint64_t seed) {
    ModelParams model;
    model.arch = arch;
    model.specs = enumerate_param_specs(arch);
    Rng rng(Rng::derive_seed(seed, "model-init"));
    model.tensors.reserve(model.specs.size());
    for (const TensorSpec& spec : model.specs) {
        switch (spec.init) {
        case InitKind::kEmbedding:
            model.tensors.push_back(init_truncated_normal(spec.shape, 0.0, 0.02, rng));
            break;
        case InitKind::kMatrix: {
            const double fan_in = static_cast<double>(spec.shape[0]);
            const double fan_out = static_cast<double>(spec.shape[1]);
            const double std = std::sqrt(2.0 / (fan_in + fan_out));
            model.tensors.push_back(init_truncated_normal(spec.shape, 0.0, std, rng));
            break;
        }
        case InitKind::kZeros:
            model.tensors.push_back(Tensor::leaf(
                spec.shape, std::vector<double>(static_cast<std::size_t>(shape_numel(spec.shape)), 0.0),
                true));
            break;
        case InitKind::kOnes:
            model.tensors.push_back(Tensor::leaf(
                spec.shape, std::vector<double>(static_cast<std::size_t>(shape_numel(spec.shape)), 1.0),
                true));
            break;
        }
    }
    for (std::size_t i = 0; i < model.specs.size(); ++i) {
        model.index.emplace(model.specs[i].name, i);
    }
    return model;
}

void TokenBatch::add(const std::vector<std::int32_t>& seq) {
    tokens.insert(tokens.end(), seq.begin(), seq.end());
    offsets.push_back(static_cast<std::int64_t>(tokens.size()));
}

namespace {

/// Fixed sinusoidal encodings, restarting at zero for every sequence.
std::vector<double> positional_encoding(const TokenBatch& batch, std::int64_t d) {
    std::vector<double> pe(static_cast<std::size_t>(batch.total_tokens() * d));
    for (std::int64_t b = 0; b < batch.size(); ++b) {
        for (std::int64_t t = batch.offsets[b]; t < batch.offsets[b + 1]; ++t) {
            const double pos = static_cast<double>(t - batch.offsets[b]);
            for (std::int64_t j = 0; j < d; j += 2) {
                const double freq = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(d));
                pe[t * d + j] = std::sin(pos * freq);
                if (j + 1 < d) {
                    pe[t * d + j + 1] = std::cos(pos * freq);
                }
            }
        }
    }
    return pe;
}

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

AttentionParams attention_params(const ModelParams& model, const std::string& prefix) {
    return {model.at(prefix + ".wq"), model.at(prefix + ".bq"),
            model.at(prefix + ".wk"), model.at(prefix + ".bk"),
            model.at(prefix + ".wv"), model.at(prefix + ".bv"),
            model.at(prefix + ".wo"), model.at(prefix + ".bo")};
}

/// Multi-head attention over one sequence: q_rows attend to kv_rows.
Tensor attend_sequence(const Tensor& q_rows, const Tensor& kv_rows,
                       const AttentionParams& p, int heads, bool causal) {
    const std::int64_t d = q_rows.shape()[1];
    const std::int64_t dh = d / heads;
    Tensor q = add_bias(matmul(q_rows, p.wq), p.bq);
    Tensor k = add_bias(matmul(kv_rows, p.wk), p.bk);
    Tensor v = add_bias(matmul(kv_rows, p.wv), p.bv);
    const std::int64_t tq = q.shape()[0];
    const std::int64_t tk = k.shape()[0];

    std::vector<double> mask;
    if (causal) {
        mask.assign(static_cast<std::size_t>(tq * tk), 0.0);
        for (std::int64_t i = 0; i < tq; ++i) {
            for (std::int64_t j = i + 1; j < tk; ++j) {
                mask[i * tk + j] = -1e30;
            }
        }
    }

    std::vector<Tensor> contexts;
    contexts.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
        if (causal) {
            scores = add_constant(scores, mask);
        }
        contexts.push_back(matmul(softmax_rows(scores), vh));
    }
    return add_bias(matmul(concat_cols(contexts), p.wo), p.bo);
}

/// Runs attention per sequence and concatenates back to the flat layout.
Tensor attention_block(const Tensor& q_flat, const Tensor& kv_flat,
                       const std::vector<std::int64_t>& q_offsets,
                       const std::vector<std::int64_t>& kv_offsets,
                       const AttentionParams& p, int heads, bool causal) {
    std::vector<Tensor> outs;
    const std::int64_t batches = static_cast<std::int64_t>(q_offsets.size()) - 1;
    outs.reserve(static_cast<std::size_t>(batches));
    for (std::int64_t b = 0; b < batches; ++b) {
        Tensor qb = slice_rows(q_flat, q_offsets[b], q_offsets[b + 1] - q_offsets[b]);
        Tensor kvb = slice_rows(kv_flat, kv_offsets[b], kv_offsets[b + 1] - kv_offsets[b]);
        outs.push_back(attend_sequence(qb, kvb, p, heads, causal));
    }
    return concat_rows(outs);
}

Tensor dense_ffn(const Tensor& x, const ModelParams& model, const std::string& prefix) {
    Tensor h = relu(add_bias(matmul(x, model.at(prefix + ".w1")), model.at(prefix + ".b1")));
    return add_bias(matmul(h, model.at(prefix + ".w2")), model.at(prefix + ".b2"));
}

MoeLayerParams moe_params(const ModelParams& model, const std::string& layer_prefix,
                          int num_experts) {
    MoeLayerParams params;
    params.gate_w = model.at(layer_prefix + ".moe.gate");
    params.experts.reserve(static_cast<std::size_t>(num_experts));
    for (int e = 0; e < num_experts; ++e) {
        const std::string p = layer_prefix + ".moe.expert" + std::to_string(e);
        params.experts.push_back({model.at(p + ".w1"), model.at(p + ".b1"),
                                  model.at(p + ".w2"), model.at(p + ".b2")});
    }
    return params;
}

Tensor layernorm_at(const Tensor& x, const ModelParams& model, const std::string& prefix) {
    return layernorm_rows(x, model.at(prefix + ".gamma"), model.at(prefix + ".beta"));
}

} // namespace

ForwardResult forward(const ModelParams& model, const TokenBatch& src,
                      const TokenBatch& decoder_in, const RouterConfig& cfg,
                      Phase phase, std::uint64_t seed) {
    const ArchConfig& arch = model.arch;
    arch.validate();
    if (cfg.num_experts != arch.num_experts) {
        throw ConfigError("forward: router num_experts does not match arch");
    }
    if (src.size() != decoder_in.size()) {
        throw ConfigError("forward: source and target batch sizes differ");
    }
    const std::int64_t d = arch.d_model;

    ForwardResult result;
    result.aux_loss = Tensor::scalar(0.0);
    int moe_ordinal = 0;

    auto run_moe = [&](const Tensor& h, const std::string& layer_prefix) {
        MoeLayerParams params = moe_params(model, layer_prefix, arch.num_experts);
        Tensor zero_residual = Tensor::zeros({h.shape()[0], d});
        MoeLayerResult moe = moe_layer_forward(
            h, params, cfg, phase,
            Rng::derive_seed(seed, static_cast<std::uint64_t>(moe_ordinal)), &zero_residual);
        result.aux_loss = add(result.aux_loss, moe.aux_loss);
        result.decisions.push_back(std::move(moe.decision));
        ++moe_ordinal;
        return moe.y;
    };

    // Encoder.
    Tensor enc_x = add_constant(embedding(model.at("embedding"), src.tokens),
                                positional_encoding(src, d));
    for (int i = 0; i < arch.enc_layers; ++i) {
        const std::string p = "enc." + std::to_string(i);
        Tensor h = layernorm_at(enc_x, model, p + ".ln1");
        enc_x = add(enc_x, attention_block(h, h, src.offsets, src.offsets,
                                           attention_params(model, p + ".attn"),
                                           arch.heads, false));
        Tensor h2 = layernorm_at(enc_x, model, p + ".ln2");
        Tensor ffn_out = arch.is_moe_layer(i + 1) ? run_moe(h2, p) : dense_ffn(h2, model, p + ".ffn");
        enc_x = add(enc_x, ffn_out);
    }
    Tensor enc_out = layernorm_at(enc_x, model, "enc.final_ln");

    // Decoder.
    const Tensor& dec_table =
        arch.tied_embeddings ? model.at("embedding") : model.at("embedding.decoder");
    Tensor dec_x = add_constant(embedding(dec_table, decoder_in.tokens),
                                positional_encoding(decoder_in, d));
    for (int i = 0; i < arch.dec_layers; ++i) {
        const std::string p = "dec." + std::to_string(i);
        Tensor h = layernorm_at(dec_x, model, p + ".ln1");
        dec_x = add(dec_x, attention_block(h, h, decoder_in.offsets, decoder_in.offsets,
                                           attention_params(model, p + ".self_attn"),
                                           arch.heads, true));
        Tensor h2 = layernorm_at(dec_x, model, p + ".ln2");
        dec_x = add(dec_x, attention_block(h2, enc_out, decoder_in.offsets, src.offsets,
                                           attention_params(model, p + ".cross_attn"),
                                           arch.heads, false));
        Tensor h3 = layernorm_at(dec_x, model, p + ".ln3");
        Tensor ffn_out = arch.is_moe_layer(i + 1) ? run_moe(h3, p) : dense_ffn(h3, model, p + ".ffn");
        dec_x = add(dec_x, ffn_out);
    }
    Tensor dec_out = layernorm_at(dec_x, model, "dec.final_ln");

    const Tensor& out_table =
        arch.tied_embeddings ? model.at("embedding") : model.at("embedding.output");
    result.logits = matmul(dec_out, transpose(out_table));
    return result;
}

std::vector<std::int32_t> generate(const ModelParams& model,
                                   const std::vector<std::int32_t>& src,
                                   std::int64_t max_len, const RouterConfig& cfg,
                                   std::int32_t bos_id, std::int32_t eos_id) {
    std::vector<std::int32_t> out;
    if (max_len <= 0) {
        return out;
    }
    TokenBatch src_batch;
    src_batch.add(src);
    std::vector<std::int32_t> dec_in = {bos_id};
    for (std::int64_t step = 0; step < max_len; ++step) {
        TokenBatch dec_batch;
        dec_batch.add(dec_in);
        ForwardResult fwd = forward(model, src_batch, dec_batch, cfg, Phase::kEval, 0);
        const std::int64_t v = fwd.logits.shape()[1];
        const std::int64_t last = fwd.logits.shape()[0] - 1;
        const double* row = fwd.logits.data().data() + last * v;
        std::int32_t best = 0;
        for (std::int64_t j = 1; j < v; ++j) {
            if (row[j] > row[best]) best = static_cast<std::int32_t>(j);
        }
        if (best == eos_id) {
            break;
        }
        out.push_back(best);
        dec_in.push_back(best);
    }
    return out;
}

} // namespace moeforge

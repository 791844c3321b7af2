// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only MoE transformer over a named parameter set.
//
// Parameter names:
//   embeddings.weight                     [V x d]
//   layer.<i>.norms.attn / norms.mlp      [d]
//   layer.<i>.attention.{wq,wk,wv,wo}     wq [d x H*hd], wk/wv [d x Hkv*hd], wo [H*hd x d]
//   layer.<i>.router.weight               [d x N]                (MoE layers)
//   layer.<i>.mlp_{gate,up}.<expert>      [d x I]
//   layer.<i>.mlp_down.<expert>           [I x d]
//   norms.final                           [d]
//   lm_head.weight                        [d x V]                (not tied to embeddings)
// where <expert> is shared<j>, expert<e> or dense. LoRA adapters live next to
// their base matrix as <name>.lora_b [in x r] and <name>.lora_a [r x out].

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "deskmoe/attention_spec.hpp"
#include "deskmoe/errors.hpp"
#include "deskmoe/layers.hpp"
#include "deskmoe/model_config.hpp"
#include "deskmoe/moe.hpp"
#include "deskmoe/ops.hpp"
#include "deskmoe/rng.hpp"
#include "deskmoe/tensor.hpp"

namespace deskmoe {

inline std::string layer_prefix(std::size_t layer) { return "layer." + std::to_string(layer) + "."; }

struct ParamSpec {
    std::string name;
    Shape shape;
    bool is_norm = false;
};

// Every base parameter of `cfg`, in a fixed order.
inline std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.hidden_dim, hd = cfg.head_dim;
    std::vector<ParamSpec> specs;
    specs.push_back({"embeddings.weight", {cfg.vocab_size, d}});
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto p = layer_prefix(l);
        specs.push_back({p + "norms.attn", {d}, true});
        specs.push_back({p + "attention.wq", {d, cfg.n_heads * hd}});
        specs.push_back({p + "attention.wk", {d, cfg.n_kv_heads * hd}});
        specs.push_back({p + "attention.wv", {d, cfg.n_kv_heads * hd}});
        specs.push_back({p + "attention.wo", {cfg.n_heads * hd, d}});
        specs.push_back({p + "norms.mlp", {d}, true});
        auto add_ffn = [&](const std::string& tag, std::size_t width) {
            specs.push_back({p + "mlp_gate." + tag, {d, width}});
            specs.push_back({p + "mlp_up." + tag, {d, width}});
            specs.push_back({p + "mlp_down." + tag, {width, d}});
        };
        if (cfg.is_moe_layer(l)) {
            specs.push_back({p + "router.weight", {d, cfg.n_specialized_experts}});
            for (std::size_t s = 0; s < cfg.n_shared_experts; ++s)
                add_ffn("shared" + std::to_string(s), cfg.expert_intermediate_size);
            for (std::size_t e = 0; e < cfg.n_specialized_experts; ++e)
                add_ffn("expert" + std::to_string(e), cfg.expert_intermediate_size);
        } else {
            add_ffn("dense", cfg.dense_width());
        }
    }
    specs.push_back({"norms.final", {d}, true});
    specs.push_back({"lm_head.weight", {d, cfg.vocab_size}});
    return specs;
}

// Norm weights start at one; matrices are N(0, init_scale^2 / fan_in).
template <typename T>
ParamSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    ParamSet<T> params;
    for (const auto& spec : param_specs(cfg)) {
        std::vector<T> values(shape_numel(spec.shape));
        if (spec.is_norm) {
            std::fill(values.begin(), values.end(), T(1));
        } else {
            const bool is_embedding = spec.name == "embeddings.weight";
            const double fan_in = is_embedding ? 1.0 : static_cast<double>(spec.shape[0]);
            const double stddev = cfg.init_scale / std::sqrt(fan_in);
            for (auto& v : values) v = static_cast<T>(rng.normal(0.0, stddev));
        }
        params.emplace(spec.name, Tensor<T>(spec.shape, std::move(values), true));
    }
    return params;
}

template <typename T>
const Tensor<T>& param(const ParamSet<T>& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw InputError("missing parameter " + name);
    return it->second;
}

template <typename T>
Linear<T> linear(const ParamSet<T>& params, const std::string& name) {
    Linear<T> lin;
    lin.weight = param(params, name);
    auto a = params.find(name + ".lora_a");
    auto b = params.find(name + ".lora_b");
    if (a != params.end() && b != params.end()) {
        lin.lora_a = a->second;
        lin.lora_b = b->second;
        lin.lora_scale = T(1) / static_cast<T>(a->second.extent(0));
    }
    return lin;
}

template <typename T>
SwiGluWeights<T> ffn_weights(const ParamSet<T>& params, const std::string& prefix, const std::string& tag) {
    return {linear(params, prefix + "mlp_gate." + tag), linear(params, prefix + "mlp_up." + tag),
            linear(params, prefix + "mlp_down." + tag)};
}

// Self-attention sublayer: projections, RoPE on queries and keys, grouped
// attention under `spec`, output projection. x is [seq x d].
template <typename T>
Tensor<T> gqa_attention(const Tensor<T>& x, const ModelConfig& cfg, const ParamSet<T>& params, std::size_t layer,
                        const AttentionSpec& spec, std::span<const std::size_t> positions) {
    detail::require_dim(x, 2, "gqa_attention");
    const std::size_t seq = x.extent(0), hd = cfg.head_dim;
    if (spec.size() != seq) {
        throw DimensionError(detail::cat("gqa_attention: mask covers ", spec.size(), " tokens, input has ", seq));
    }
    const auto p = layer_prefix(layer);
    auto q = reshape(linear(params, p + "attention.wq")(x), {seq, cfg.n_heads, hd});
    auto k = reshape(linear(params, p + "attention.wk")(x), {seq, cfg.n_kv_heads, hd});
    auto v = reshape(linear(params, p + "attention.wv")(x), {seq, cfg.n_kv_heads, hd});
    q = rope_apply(q, positions, cfg.rope_base);
    k = rope_apply(k, positions, cfg.rope_base);
    auto o = grouped_attention(q, k, v, spec);
    return linear(params, p + "attention.wo")(reshape(o, {seq, cfg.n_heads * hd}));
}

template <typename T>
struct MlpOutput {
    Tensor<T> out;
    std::optional<RoutingOutcome> routing;
};

template <typename T>
MlpOutput<T> mlp_block(const Tensor<T>& x, const ModelConfig& cfg, const ParamSet<T>& params, std::size_t layer) {
    const auto p = layer_prefix(layer);
    if (!cfg.is_moe_layer(layer)) return {swiglu(x, ffn_weights(params, p, "dense")), std::nullopt};
    std::vector<SwiGluWeights<T>> shared, specialized;
    for (std::size_t s = 0; s < cfg.n_shared_experts; ++s)
        shared.push_back(ffn_weights(params, p, "shared" + std::to_string(s)));
    for (std::size_t e = 0; e < cfg.n_specialized_experts; ++e)
        specialized.push_back(ffn_weights(params, p, "expert" + std::to_string(e)));
    auto routing = route_tokens(x, param(params, p + "router.weight"), cfg.top_k);
    auto out = moe_forward(x, shared, specialized, routing);
    return {out, std::move(routing)};
}

template <typename T>
struct DecoderOutput {
    Tensor<T> logits;                       // [seq x V]
    std::vector<RoutingOutcome> routing;    // one per MoE layer
    Tensor<double> aux;                     // mean over MoE layers; undefined for dense models
    Tensor<double> z;
};

template <typename T>
DecoderOutput<T> decoder_forward(std::span<const std::int32_t> tokens, std::span<const std::size_t> positions,
                                 const ModelConfig& cfg, const ParamSet<T>& params, const AttentionSpec& spec) {
    if (tokens.empty()) throw InputError("decoder_forward: empty token sequence");
    if (positions.size() != tokens.size()) throw DimensionError("decoder_forward: positions must align with tokens");
    std::vector<std::size_t> ids(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= cfg.vocab_size) {
            throw InputError(detail::cat("decoder_forward: token ", tokens[i], " outside vocab of ", cfg.vocab_size));
        }
        ids[i] = static_cast<std::size_t>(tokens[i]);
    }
    const T eps = static_cast<T>(cfg.rms_eps);
    DecoderOutput<T> result;
    std::vector<Tensor<double>> aux, z;
    auto h = index_rows(param(params, "embeddings.weight"), ids);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto p = layer_prefix(l);
        auto a = gqa_attention(rmsnorm(h, param(params, p + "norms.attn"), eps), cfg, params, l, spec, positions);
        h = add(h, a);
        auto mlp = mlp_block(rmsnorm(h, param(params, p + "norms.mlp"), eps), cfg, params, l);
        h = add(h, mlp.out);
        if (mlp.routing) {
            aux.push_back(aux_loss(*mlp.routing));
            z.push_back(z_loss(*mlp.routing));
            result.routing.push_back(std::move(*mlp.routing));
        }
    }
    h = rmsnorm(h, param(params, "norms.final"), eps);
    result.logits = linear(params, "lm_head.weight")(h);
    if (!aux.empty()) {
        result.aux = layer_mean(aux);
        result.z = layer_mean(z);
    }
    return result;
}

// Single unpacked sequence: positions 0..n-1, plain causal mask.
template <typename T>
DecoderOutput<T> decoder_forward(std::span<const std::int32_t> tokens, const ModelConfig& cfg,
                                 const ParamSet<T>& params) {
    std::vector<std::size_t> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
    return decoder_forward(tokens, positions, cfg, params, AttentionSpec::causal(tokens.size()));
}

template <typename U, typename T>
ParamSet<U> convert_params(const ParamSet<T>& params) {
    ParamSet<U> out;
    for (const auto& [name, t] : params) {
        std::vector<U> v(t.numel());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>(t[i]);
        out.emplace(name, Tensor<U>(t.shape(), std::move(v), t.requires_grad()));
    }
    return out;
}

template <typename T>
ParamSet<T> clone_params(const ParamSet<T>& params) {
    return convert_params<T>(params);
}

template <typename T>
std::size_t count_elements(const ParamSet<T>& params) {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

}  // namespace deskmoe

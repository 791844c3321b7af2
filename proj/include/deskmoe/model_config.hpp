// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <string>

#include "deskmoe/errors.hpp"
#include "deskmoe/tensor.hpp"

namespace deskmoe {

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t n_kv_heads = 2;
    std::size_t head_dim = 16;
    std::size_t hidden_dim = 64;
    std::size_t vocab_size = 512;
    std::size_t expert_intermediate_size = 32;
    std::size_t n_shared_experts = 1;
    std::size_t n_specialized_experts = 8;
    std::size_t top_k = 2;
    double rope_base = 10000.0;
    std::size_t max_context = 128;
    // Layer i uses MoE iff moe_interval > 0 and (i + 1) % moe_interval == 0.
    // 1 puts MoE in every layer; 0 gives a dense model.
    std::size_t moe_interval = 1;
    // Intermediate size of dense (non-MoE) SwiGLU layers; 0 means
    // expert_intermediate_size * (n_shared_experts + top_k), the active width.
    std::size_t dense_intermediate_size = 0;
    double rms_eps = 1e-6;
    double init_scale = 1.0;

    bool is_moe_layer(std::size_t layer) const { return moe_interval > 0 && (layer + 1) % moe_interval == 0; }

    std::size_t dense_width() const {
        return dense_intermediate_size ? dense_intermediate_size
                                       : expert_intermediate_size * (n_shared_experts + top_k);
    }

    std::size_t group_size() const { return n_heads / n_kv_heads; }

    void validate() const {
        auto need = [](bool ok, const std::string& msg) {
            if (!ok) throw ConfigError("model config: " + msg);
        };
        need(n_layers >= 1, "n_layers must be >= 1");
        need(n_heads >= 1 && n_kv_heads >= 1, "head counts must be >= 1");
        need(n_heads % n_kv_heads == 0, "n_heads must be divisible by n_kv_heads");
        need(head_dim >= 2 && head_dim % 2 == 0, "head_dim must be even");
        need(hidden_dim >= 1 && vocab_size >= 1, "hidden_dim and vocab_size must be >= 1");
        need(rope_base > 0.0, "rope_base must be positive");
        need(max_context >= 1, "max_context must be >= 1");
        need(rms_eps >= 0.0, "rms_eps must be non-negative");
        if (moe_interval > 0) {
            need(n_specialized_experts >= 1, "MoE layers need at least one specialized expert");
            need(top_k >= 1 && top_k <= n_specialized_experts, "top_k must be in [1, n_specialized_experts]");
            need(expert_intermediate_size >= 1, "expert_intermediate_size must be >= 1");
        }
    }

    // Architecture of the released 30B model. Toy runs scale this down.
    static ModelConfig reference_30b() {
        ModelConfig c;
        c.n_layers = 30;
        c.n_heads = 24;
        c.n_kv_heads = 6;
        c.head_dim = 128;
        c.hidden_dim = 24 * 128;
        c.vocab_size = 180000;
        c.expert_intermediate_size = 2048;
        c.n_shared_experts = 2;
        c.n_specialized_experts = 48;
        c.top_k = 4;
        c.rope_base = 10000.0;
        c.max_context = 4096;
        return c;
    }

    // Default desk-scale model.
    static ModelConfig toy() { return ModelConfig{}; }
};

template <typename T>
using ParamSet = std::map<std::string, Tensor<T>>;

}  // namespace deskmoe

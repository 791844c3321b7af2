// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// On-disk checkpoints: a directory holding manifest.ini (the model config plus
// the name and shape of every parameter) and one <name>.bin per parameter,
// stored as little-endian IEEE-754 64-bit values in row-major order.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "deskmoe/errors.hpp"
#include "deskmoe/model_config.hpp"
#include "deskmoe/tensor.hpp"

namespace deskmoe {

namespace pt = boost::property_tree;

inline void write_model_config(pt::ptree& tree, const ModelConfig& c, const std::string& section = "model") {
    auto put = [&](const char* key, auto v) { tree.put(section + "." + key, v); };
    put("n_layers", c.n_layers);
    put("n_heads", c.n_heads);
    put("n_kv_heads", c.n_kv_heads);
    put("head_dim", c.head_dim);
    put("hidden_dim", c.hidden_dim);
    put("vocab_size", c.vocab_size);
    put("expert_intermediate_size", c.expert_intermediate_size);
    put("n_shared_experts", c.n_shared_experts);
    put("n_specialized_experts", c.n_specialized_experts);
    put("top_k", c.top_k);
    put("rope_base", c.rope_base);
    put("max_context", c.max_context);
    put("moe_interval", c.moe_interval);
    put("dense_intermediate_size", c.dense_intermediate_size);
    put("rms_eps", c.rms_eps);
    put("init_scale", c.init_scale);
}

// Missing keys keep their defaults from `base`.
inline ModelConfig read_model_config(const pt::ptree& tree, const std::string& section = "model",
                                     ModelConfig base = ModelConfig{}) {
    auto node = tree.get_child_optional(section);
    if (!node) return base;
    auto get = [&](const char* key, auto& field) {
        using F = std::decay_t<decltype(field)>;
        if (auto v = node->get_optional<std::string>(key)) {
            try {
                field = node->get<F>(key);
            } catch (const pt::ptree_error&) {
                throw ConfigError(detail::cat("[", section, "] ", key, " = '", *v, "' is not a valid value"));
            }
        }
    };
    ModelConfig c = base;
    get("n_layers", c.n_layers);
    get("n_heads", c.n_heads);
    get("n_kv_heads", c.n_kv_heads);
    get("head_dim", c.head_dim);
    get("hidden_dim", c.hidden_dim);
    get("vocab_size", c.vocab_size);
    get("expert_intermediate_size", c.expert_intermediate_size);
    get("n_shared_experts", c.n_shared_experts);
    get("n_specialized_experts", c.n_specialized_experts);
    get("top_k", c.top_k);
    get("rope_base", c.rope_base);
    get("max_context", c.max_context);
    get("moe_interval", c.moe_interval);
    get("dense_intermediate_size", c.dense_intermediate_size);
    get("rms_eps", c.rms_eps);
    get("init_scale", c.init_scale);
    return c;
}

struct ParamArray {
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    ModelConfig config;
    std::map<std::string, ParamArray> params;
};

template <typename T>
Checkpoint make_checkpoint(const ModelConfig& cfg, const ParamSet<T>& params) {
    Checkpoint ck;
    ck.config = cfg;
    for (const auto& [name, t] : params) {
        ParamArray a{t.shape(), std::vector<double>(t.numel())};
        for (std::size_t i = 0; i < a.values.size(); ++i) a.values[i] = static_cast<double>(t[i]);
        ck.params.emplace(name, std::move(a));
    }
    return ck;
}

template <typename T>
ParamSet<T> to_param_set(const Checkpoint& ck, bool requires_grad = true) {
    ParamSet<T> out;
    for (const auto& [name, a] : ck.params) {
        std::vector<T> v(a.values.begin(), a.values.end());
        out.emplace(name, Tensor<T>(a.shape, std::move(v), requires_grad));
    }
    return out;
}

namespace detail {

inline std::uint64_t to_le(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    else return __builtin_bswap64(v);
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    pt::ptree tree;
    write_model_config(tree, ck.config);
    tree.put("format.version", 1);
    tree.put("format.dtype", "f64le");
    for (const auto& [name, a] : ck.params) {
        tree.put(pt::ptree::path_type("params/" + name, '/'), shape_str(a.shape));
        std::ofstream out(dir / (name + ".bin"), std::ios::binary);
        if (!out) throw CheckpointError("cannot write " + (dir / (name + ".bin")).string());
        for (double v : a.values) {
            std::uint64_t bits = detail::to_le(std::bit_cast<std::uint64_t>(v));
            out.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
        }
    }
    pt::write_ini((dir / "manifest.ini").string(), tree);
}

inline Shape parse_shape(const std::string& text) {
    if (text.size() < 2 || text.front() != '[' || text.back() != ']') throw CheckpointError("bad shape " + text);
    Shape shape;
    std::string inner = text.substr(1, text.size() - 2);
    if (inner.empty()) return shape;
    std::size_t start = 0;
    while (start <= inner.size()) {
        const auto x = inner.find('x', start);
        const auto tok = inner.substr(start, x == std::string::npos ? std::string::npos : x - start);
        try {
            shape.push_back(std::stoull(tok));
        } catch (...) {
            throw CheckpointError("bad shape " + text);
        }
        if (x == std::string::npos) break;
        start = x + 1;
    }
    return shape;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    pt::ptree tree;
    try {
        pt::read_ini((dir / "manifest.ini").string(), tree);
    } catch (const pt::ptree_error& e) {
        throw CheckpointError(std::string("cannot read manifest: ") + e.what());
    }
    if (tree.get<int>("format.version", 0) != 1) throw CheckpointError("unsupported checkpoint version");
    Checkpoint ck;
    try {
        ck.config = read_model_config(tree);
    } catch (const ConfigError& e) {
        throw CheckpointError(e.what());
    }
    auto params = tree.get_child_optional("params");
    if (!params) throw CheckpointError("manifest lists no parameters");
    for (const auto& [name, node] : *params) {
        ParamArray a;
        a.shape = parse_shape(node.data());
        a.values.resize(shape_numel(a.shape));
        std::ifstream in(dir / (name + ".bin"), std::ios::binary);
        if (!in) throw CheckpointError("missing parameter file for " + name);
        for (auto& v : a.values) {
            std::uint64_t bits = 0;
            if (!in.read(reinterpret_cast<char*>(&bits), sizeof(bits))) throw CheckpointError("truncated " + name);
            v = std::bit_cast<double>(detail::to_le(bits));
        }
        if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes in " + name);
        ck.params.emplace(name, std::move(a));
    }
    return ck;
}

}  // namespace deskmoe

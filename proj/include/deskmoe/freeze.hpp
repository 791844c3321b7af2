// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Freeze plans and LoRA wrapping.
//
// A plan is a list of unfreeze rules. An empty plan trains everything;
// otherwise a base parameter is trainable iff some rule matches it. A LoRA spec
// adds rank-r adapter pairs to every matrix in its target submodules; those
// base matrices are frozen regardless of the rules and the adapters train.
//
// Plan text, rules separated by ';':
//   <layers>:<submodules>      layers  = all | last<N> | first<N> | <a> | <a>-<b>
//                              submodules = * | comma list of selector names
//   lora=<rank>@<submodules>   e.g. lora=8@mlp_gate,mlp_up,mlp_down
//   full                       the empty plan

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "deskmoe/errors.hpp"
#include "deskmoe/model.hpp"
#include "deskmoe/model_config.hpp"
#include "deskmoe/rng.hpp"

namespace deskmoe {

enum class Submodule { attention, mlp_up, mlp_down, mlp_gate, norms, embeddings, lm_head, router, experts };

inline const std::vector<std::pair<Submodule, std::string>>& submodule_names() {
    static const std::vector<std::pair<Submodule, std::string>> names = {
        {Submodule::attention, "attention"}, {Submodule::mlp_up, "mlp_up"},     {Submodule::mlp_down, "mlp_down"},
        {Submodule::mlp_gate, "mlp_gate"},   {Submodule::norms, "norms"},       {Submodule::embeddings, "embeddings"},
        {Submodule::lm_head, "lm_head"},     {Submodule::router, "router"},     {Submodule::experts, "experts"}};
    return names;
}

inline std::string to_string(Submodule s) {
    for (const auto& [k, v] : submodule_names())
        if (k == s) return v;
    return "?";
}

inline Submodule parse_submodule(const std::string& name) {
    for (const auto& [k, v] : submodule_names())
        if (v == name) return k;
    throw PlanError("unknown submodule '" + name + "'");
}

struct LayerSelector {
    enum class Kind { all, range, first, last };
    Kind kind = Kind::all;
    std::size_t a = 0;
    std::size_t b = 0;

    static LayerSelector everything() { return {}; }
    static LayerSelector range(std::size_t first, std::size_t last) { return {Kind::range, first, last}; }
    static LayerSelector first_n(std::size_t n) { return {Kind::first, n, 0}; }
    static LayerSelector last_n(std::size_t n) { return {Kind::last, n, 0}; }

    // Inclusive [lo, hi] for a model with n_layers; nullopt for `all`.
    std::optional<std::pair<std::size_t, std::size_t>> resolve(std::size_t n_layers) const {
        switch (kind) {
            case Kind::all:
                return std::nullopt;
            case Kind::range:
                if (a > b || b >= n_layers)
                    throw PlanError(detail::cat("layer range ", a, "-", b, " invalid for ", n_layers, " layers"));
                return std::make_pair(a, b);
            case Kind::first:
            case Kind::last:
                if (a == 0 || a > n_layers)
                    throw PlanError(detail::cat("cannot select ", a, " layers of a ", n_layers, "-layer model"));
                return kind == Kind::first ? std::make_pair(std::size_t{0}, a - 1)
                                           : std::make_pair(n_layers - a, n_layers - 1);
        }
        return std::nullopt;
    }
};

struct FreezeRule {
    LayerSelector layers;
    std::set<Submodule> submodules;  // empty = every submodule
};

struct LoraSpec {
    std::size_t rank = 8;
    std::set<Submodule> targets;
    double init_std = 0.02;
};

struct FreezePlan {
    std::string name;
    std::vector<FreezeRule> rules;
    std::optional<LoraSpec> lora;

    bool empty() const { return rules.empty() && !lora; }

    static FreezePlan parse(const std::string& text, std::string name = {});
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(trim(cur));
    return out;
}

inline std::size_t parse_count(const std::string& s, const std::string& context) {
    try {
        std::size_t used = 0;
        const auto v = std::stoull(s, &used);
        if (used != s.size()) throw PlanError("");
        return static_cast<std::size_t>(v);
    } catch (...) {
        throw PlanError("bad number '" + s + "' in " + context);
    }
}

inline std::set<Submodule> parse_submodule_list(const std::string& text) {
    std::set<Submodule> out;
    if (text == "*") return out;
    for (const auto& part : split(text, ',')) {
        if (!part.empty()) out.insert(parse_submodule(part));
    }
    if (out.empty()) throw PlanError("empty submodule list");
    return out;
}

}  // namespace detail

inline FreezePlan FreezePlan::parse(const std::string& text, std::string name) {
    FreezePlan plan;
    plan.name = name.empty() ? text : std::move(name);
    for (const auto& raw : detail::split(text, ';')) {
        if (raw.empty() || raw == "full") continue;
        if (raw.rfind("lora=", 0) == 0) {
            const auto at = raw.find('@');
            if (at == std::string::npos) throw PlanError("lora entry needs '@<targets>': " + raw);
            LoraSpec spec;
            spec.rank = detail::parse_count(raw.substr(5, at - 5), raw);
            if (spec.rank < 1) throw PlanError("lora rank must be >= 1");
            const auto targets = raw.substr(at + 1);
            if (targets == "*") {
                spec.targets = {Submodule::attention, Submodule::mlp_gate, Submodule::mlp_up, Submodule::mlp_down,
                                Submodule::router};
            } else {
                spec.targets = detail::parse_submodule_list(targets);
            }
            plan.lora = spec;
            continue;
        }
        const auto colon = raw.find(':');
        if (colon == std::string::npos) throw PlanError("rule needs '<layers>:<submodules>': " + raw);
        const auto sel = detail::trim(raw.substr(0, colon));
        FreezeRule rule;
        if (sel == "all") {
            rule.layers = LayerSelector::everything();
        } else if (sel.rfind("last", 0) == 0) {
            rule.layers = LayerSelector::last_n(detail::parse_count(sel.substr(4), raw));
        } else if (sel.rfind("first", 0) == 0) {
            rule.layers = LayerSelector::first_n(detail::parse_count(sel.substr(5), raw));
        } else if (const auto dash = sel.find('-'); dash != std::string::npos) {
            rule.layers = LayerSelector::range(detail::parse_count(sel.substr(0, dash), raw),
                                               detail::parse_count(sel.substr(dash + 1), raw));
        } else {
            const auto l = detail::parse_count(sel, raw);
            rule.layers = LayerSelector::range(l, l);
        }
        rule.submodules = detail::parse_submodule_list(detail::trim(raw.substr(colon + 1)));
        plan.rules.push_back(rule);
    }
    return plan;
}

struct ParamLocation {
    std::optional<std::size_t> layer;
    Submodule submodule = Submodule::embeddings;
    bool is_adapter = false;
};

inline ParamLocation locate_param(const std::string& name) {
    ParamLocation loc;
    auto parts = detail::split(name, '.');
    if (parts.size() >= 2 && (parts.back() == "lora_a" || parts.back() == "lora_b")) {
        loc.is_adapter = true;
        parts.pop_back();
    }
    std::size_t k = 0;
    if (parts.size() >= 3 && parts[0] == "layer") {
        loc.layer = detail::parse_count(parts[1], name);
        k = 2;
    }
    if (k >= parts.size()) throw PlanError("cannot classify parameter " + name);
    loc.submodule = parse_submodule(parts[k]);
    return loc;
}

// Selector names a parameter answers to. Expert FFN tensors also answer to
// `experts`.
inline std::set<Submodule> param_selectors(const std::string& name, const ModelConfig& cfg) {
    const auto loc = locate_param(name);
    std::set<Submodule> out{loc.submodule};
    const bool is_ffn = loc.submodule == Submodule::mlp_gate || loc.submodule == Submodule::mlp_up ||
                        loc.submodule == Submodule::mlp_down;
    if (is_ffn && loc.layer && cfg.is_moe_layer(*loc.layer)) out.insert(Submodule::experts);
    return out;
}

inline bool rule_matches(const FreezeRule& rule, const std::string& name, const ModelConfig& cfg) {
    const auto loc = locate_param(name);
    const auto range = rule.layers.resolve(cfg.n_layers);
    if (range) {
        if (!loc.layer || *loc.layer < range->first || *loc.layer > range->second) return false;
    }
    if (rule.submodules.empty()) return true;
    for (auto s : param_selectors(name, cfg))
        if (rule.submodules.count(s)) return true;
    return false;
}

inline bool lora_targets(const LoraSpec& spec, const std::string& name, const ModelConfig& cfg) {
    for (auto s : param_selectors(name, cfg))
        if (spec.targets.count(s)) return true;
    return false;
}

template <typename T>
struct FrozenModel {
    ParamSet<T> params;                  // base params (shared handles) plus any adapters
    std::vector<std::string> trainable;  // sorted
    std::size_t trainable_count = 0;     // scalar parameters that will train
};

// Marks trainability on `params` in place (requires_grad) and returns the
// augmented set. Adapter B factors draw from `seed`; A factors start at zero,
// so the wrapped model initially computes exactly what the base model does.
template <typename T>
FrozenModel<T> apply_freeze_plan(const ParamSet<T>& params, const FreezePlan& plan, const ModelConfig& cfg,
                                 std::uint64_t seed = 0) {
    for (const auto& rule : plan.rules) rule.layers.resolve(cfg.n_layers);
    if (plan.lora) {
        if (plan.lora->rank < 1) throw PlanError("lora rank must be >= 1");
        for (auto s : plan.lora->targets) {
            if (s == Submodule::norms || s == Submodule::embeddings)
                throw PlanError("lora cannot target " + to_string(s) + " (not a projection)");
        }
    }
    FrozenModel<T> out;
    Rng rng(seed);
    for (const auto& [name, tensor] : params) {
        if (locate_param(name).is_adapter) throw PlanError("parameter set already carries adapters: " + name);
        Tensor<T> t = tensor;
        bool train = plan.rules.empty() && !plan.lora;
        for (const auto& rule : plan.rules) train = train || rule_matches(rule, name, cfg);
        const bool wrap = plan.lora && t.dim() == 2 && lora_targets(*plan.lora, name, cfg);
        if (wrap) train = false;
        t.set_requires_grad(train);
        out.params.emplace(name, t);
        if (train) {
            out.trainable.push_back(name);
            out.trainable_count += t.numel();
        }
        if (wrap) {
            const std::size_t r = plan.lora->rank, in = t.extent(0), o = t.extent(1);
            std::vector<T> b(in * r);
            for (auto& v : b) v = static_cast<T>(rng.normal(0.0, plan.lora->init_std));
            out.params.emplace(name + ".lora_b", Tensor<T>({in, r}, std::move(b), true));
            out.params.emplace(name + ".lora_a", Tensor<T>::zeros({r, o}, true));
            out.trainable.push_back(name + ".lora_a");
            out.trainable.push_back(name + ".lora_b");
            out.trainable_count += r * (in + o);
        }
    }
    std::sort(out.trainable.begin(), out.trainable.end());
    return out;
}

// Closed-form parameter count of the base parameters matched by `rule`.
inline std::size_t analytic_param_count(const ModelConfig& cfg, const FreezeRule& rule) {
    const std::size_t d = cfg.hidden_dim, hd = cfg.head_dim, v = cfg.vocab_size;
    const auto range = rule.layers.resolve(cfg.n_layers);
    auto wants = [&](Submodule s) { return rule.submodules.empty() || rule.submodules.count(s) > 0; };
    std::size_t total = 0;
    if (!range) {
        if (wants(Submodule::embeddings)) total += v * d;
        if (wants(Submodule::lm_head)) total += d * v;
        if (wants(Submodule::norms)) total += d;
    }
    const std::size_t lo = range ? range->first : 0, hi = range ? range->second : cfg.n_layers - 1;
    for (std::size_t l = lo; l <= hi; ++l) {
        const bool moe = cfg.is_moe_layer(l);
        if (wants(Submodule::attention)) total += d * cfg.n_heads * hd * 2 + d * cfg.n_kv_heads * hd * 2;
        if (wants(Submodule::norms)) total += 2 * d;
        if (moe && wants(Submodule::router)) total += d * cfg.n_specialized_experts;
        const std::size_t ffn_each =
            moe ? (cfg.n_shared_experts + cfg.n_specialized_experts) * d * cfg.expert_intermediate_size
                : d * cfg.dense_width();
        const bool all_experts = moe && wants(Submodule::experts);
        for (auto s : {Submodule::mlp_gate, Submodule::mlp_up, Submodule::mlp_down})
            if (all_experts || wants(s)) total += ffn_each;
    }
    return total;
}

}  // namespace deskmoe

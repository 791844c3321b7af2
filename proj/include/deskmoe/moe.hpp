// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Fine-grained mixture of experts with shared experts, top-k routing and the
// two router regularizers (load-balancing auxiliary loss and z-loss).
//
// The router always runs in 64-bit: hidden states and router weights are cast
// up before the logits are formed, whatever precision the rest of the model
// trains in. Every token gets exactly top_k specialized experts; there is no
// capacity limit and no token is ever dropped.

#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <type_traits>
#include <vector>

#include "deskmoe/errors.hpp"
#include "deskmoe/ops.hpp"
#include "deskmoe/tensor.hpp"

namespace deskmoe {

// Projection with an optional low-rank adapter:
//   y = x W + lora_scale * (x B) A
// where B is the input-side factor [in x r] and A the output-side factor [r x out].
template <typename T>
struct Linear {
    Tensor<T> weight;
    Tensor<T> lora_b;
    Tensor<T> lora_a;
    T lora_scale = T(1);

    Tensor<T> operator()(const Tensor<T>& x) const {
        auto y = matmul(x, weight);
        if (lora_a.defined()) y = add(y, scale(matmul(matmul(x, lora_b), lora_a), lora_scale));
        return y;
    }
};

template <typename T>
struct SwiGluWeights {
    Linear<T> gate;  // [d x I]
    Linear<T> up;    // [d x I]
    Linear<T> down;  // [I x d]
};

// down(silu(x gate) * (x up))
template <typename T>
Tensor<T> swiglu(const Tensor<T>& x, const SwiGluWeights<T>& w) {
    return w.down(mul(silu(w.gate(x)), w.up(x)));
}

struct RoutingOutcome {
    Tensor<double> logits;            // [B x N] pre-softmax router logits
    Tensor<double> probs;             // [B x N]
    std::vector<std::size_t> topk;    // [B x K] row-major, descending probability
    Tensor<double> p_agg;             // [N], column sums of probs (differentiable)
    std::vector<std::size_t> c_agg;   // [N], activation counts
    std::size_t tokens = 0;
    std::size_t n_experts = 0;
    std::size_t top_k = 0;

    std::span<const std::size_t> experts_of(std::size_t token) const {
        return std::span<const std::size_t>(topk).subspan(token * top_k, top_k);
    }
};

namespace detail {

template <typename T>
Tensor<double> to_double(const Tensor<T>& x) {
    if constexpr (std::is_same_v<T, double>) return x;
    else return cast<double>(x);
}

}  // namespace detail

// Selects the k highest-probability experts of every row; ties go to the
// lowest expert index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> probs, std::size_t rows, std::size_t n,
                                              std::size_t k) {
    std::vector<std::size_t> out;
    out.reserve(rows * k);
    std::vector<std::size_t> order(n);
    for (std::size_t r = 0; r < rows; ++r) {
        std::iota(order.begin(), order.end(), 0);
        const double* row = probs.data() + r * n;
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                          [row](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
        out.insert(out.end(), order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    }
    return out;
}

template <typename T>
RoutingOutcome route_tokens(const Tensor<T>& hidden, const Tensor<T>& router_weight, std::size_t top_k) {
    detail::require_dim(hidden, 2, "route_tokens");
    detail::require_dim(router_weight, 2, "route_tokens");
    if (router_weight.extent(0) != hidden.extent(1)) {
        throw DimensionError(detail::cat("route_tokens: router expects ", router_weight.extent(0),
                                         " features, hidden has ", hidden.extent(1)));
    }
    const std::size_t n = router_weight.extent(1);
    if (top_k < 1 || top_k > n) throw ConfigError(detail::cat("route_tokens: top_k ", top_k, " with ", n, " experts"));

    RoutingOutcome r;
    r.tokens = hidden.extent(0);
    r.n_experts = n;
    r.top_k = top_k;
    try {
        r.logits = matmul(detail::to_double(hidden), detail::to_double(router_weight));
    } catch (const NumericError&) {
        throw NumericError("route_tokens: non-finite router logits");
    }
    r.probs = softmax(r.logits, 1);
    r.topk = top_k_indices(r.probs.data(), r.tokens, n, top_k);
    r.p_agg = sum_rows(r.probs);
    r.c_agg.assign(n, 0);
    for (auto e : r.topk) ++r.c_agg[e];
    return r;
}

// Shared experts see every token; each specialized expert sees the tokens
// routed to it, and its output is weighted by the raw router probability.
template <typename T>
Tensor<T> moe_forward(const Tensor<T>& hidden, const std::vector<SwiGluWeights<T>>& shared,
                      const std::vector<SwiGluWeights<T>>& specialized, const RoutingOutcome& routing) {
    detail::require_dim(hidden, 2, "moe_forward");
    const std::size_t batch = hidden.extent(0);
    if (routing.tokens != batch) {
        throw DimensionError(detail::cat("moe_forward: routing covers ", routing.tokens, " tokens, hidden has ", batch));
    }
    if (specialized.size() != routing.n_experts) {
        throw DimensionError("moe_forward: specialized expert count differs from router width");
    }
    Tensor<T> out;
    auto accumulate = [&out](Tensor<T> t) { out = out.defined() ? add(out, t) : t; };
    for (const auto& expert : shared) accumulate(swiglu(hidden, expert));

    std::vector<std::vector<std::size_t>> assigned(routing.n_experts);
    for (std::size_t t = 0; t < batch; ++t)
        for (auto e : routing.experts_of(t)) assigned[e].push_back(t);

    Tensor<T> probs;
    if constexpr (std::is_same_v<T, double>) probs = routing.probs;
    else probs = cast<T>(routing.probs);

    for (std::size_t e = 0; e < routing.n_experts; ++e) {
        const auto& toks = assigned[e];
        if (toks.empty()) continue;
        auto y = swiglu(index_rows(hidden, toks), specialized[e]);
        const std::vector<std::size_t> cols(toks.size(), e);
        y = scale_rows(y, gather_elems(probs, toks, cols));
        accumulate(scatter_add_rows(y, toks, batch));
    }
    if (!out.defined()) out = Tensor<T>::zeros(hidden.shape());
    return out;
}

// L_aux = N * sum_i (p_i / B) * (c_i / (B K)), differentiable through p only.
inline Tensor<double> aux_loss(const Tensor<double>& p_agg, std::span<const double> c_agg, std::size_t n,
                               std::size_t k, std::size_t batch) {
    if (batch == 0) throw EmptyBatchError("aux_loss: empty batch");
    if (p_agg.numel() != n || c_agg.size() != n) throw DimensionError("aux_loss: aggregate length differs from N");
    const double b = static_cast<double>(batch);
    std::vector<double> weights(n);
    for (std::size_t i = 0; i < n; ++i) weights[i] = static_cast<double>(n) * c_agg[i] / (b * b * static_cast<double>(k));
    return dot(p_agg, Tensor<double>({n}, std::move(weights)));
}

inline Tensor<double> aux_loss(const RoutingOutcome& r) {
    std::vector<double> counts(r.c_agg.begin(), r.c_agg.end());
    return aux_loss(r.p_agg, counts, r.n_experts, r.top_k, r.tokens);
}

// L_Z = (1/B) sum_j (logsumexp_i z_ij)^2
inline Tensor<double> z_loss(const Tensor<double>& logits) {
    detail::require_dim(logits, 2, "z_loss");
    return mean(square(logsumexp(logits)));
}

inline Tensor<double> z_loss(const RoutingOutcome& r) {
    if (r.tokens == 0) throw EmptyBatchError("z_loss: empty batch");
    return z_loss(r.logits);
}

inline Tensor<double> layer_mean(const std::vector<Tensor<double>>& per_layer) {
    if (per_layer.empty()) throw EmptyBatchError("layer_mean: no layers");
    Tensor<double> acc = per_layer.front();
    for (std::size_t i = 1; i < per_layer.size(); ++i) acc = add(acc, per_layer[i]);
    return scale(acc, 1.0 / static_cast<double>(per_layer.size()));
}

// L = L_LM + alpha * L_aux + beta * L_Z
template <typename T>
Tensor<T> total_objective(const Tensor<T>& lm, const Tensor<double>& aux, const Tensor<double>& z, double alpha,
                          double beta) {
    if (alpha < 0.0 || beta < 0.0) throw ConfigError("total_objective: coefficients must be non-negative");
    auto reg = add(scale(aux, alpha), scale(z, beta));
    if constexpr (std::is_same_v<T, double>) return add(lm, reg);
    else return add(lm, cast<T>(reg));
}

}  // namespace deskmoe

// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Fused decoder kernels with hand-written backward passes: RMSNorm, rotary
// embeddings, grouped-query attention and the summed LM cross-entropy.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "deskmoe/attention_spec.hpp"
#include "deskmoe/errors.hpp"
#include "deskmoe/ops.hpp"
#include "deskmoe/tensor.hpp"

namespace deskmoe {

inline constexpr double kRmsNormEps = 1e-6;

// x / sqrt(mean(x^2) + eps) * weight, over the last axis.
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& weight, T eps = T(kRmsNormEps)) {
    auto [rows, d] = detail::as_rows(x, "rmsnorm");
    if (weight.numel() != d) {
        throw DimensionError(detail::cat("rmsnorm: weight has ", weight.numel(), " entries, features are ", d));
    }
    std::vector<T> out(x.numel());
    std::vector<T> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T ms = T(0);
        for (std::size_t c = 0; c < d; ++c) ms += x[r * d + c] * x[r * d + c];
        ms /= static_cast<T>(d);
        const T denom = std::sqrt(ms + eps);
        if (!(denom > T(0))) throw NumericError("rmsnorm: zero row with eps = 0");
        inv[r] = T(1) / denom;
        for (std::size_t c = 0; c < d; ++c) out[r * d + c] = x[r * d + c] * inv[r] * weight[c];
    }
    auto y = detail::make_output<T>(x.shape(), std::move(out), "rmsnorm");
    if (detail::recording(x, weight)) {
        detail::attach(y, [x, weight, y, inv = std::move(inv), rows = rows, d = d]() mutable {
            auto g = y.grad();
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    T acc = T(0);
                    for (std::size_t c = 0; c < d; ++c) acc += g[r * d + c] * weight[c] * x[r * d + c];
                    const T k = inv[r] * inv[r] * inv[r] * acc / static_cast<T>(d);
                    for (std::size_t c = 0; c < d; ++c)
                        gx[r * d + c] += g[r * d + c] * weight[c] * inv[r] - x[r * d + c] * k;
                }
            }
            if (weight.requires_grad()) {
                auto gw = weight.grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < d; ++c) gw[c] += g[r * d + c] * x[r * d + c] * inv[r];
            }
        });
    }
    return y;
}

// Rotates adjacent feature pairs (2i, 2i+1) of every head by
// position * base^(-2i / head_dim). Input is [seq x heads x head_dim].
template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, std::span<const std::size_t> positions, double base) {
    detail::require_dim(x, 3, "rope_apply");
    const std::size_t seq = x.extent(0), heads = x.extent(1), hd = x.extent(2);
    if (hd % 2 != 0) throw ConfigError(detail::cat("rope_apply: head_dim ", hd, " is odd"));
    if (!(base > 0.0)) throw ConfigError("rope_apply: base must be positive");
    if (positions.size() != seq) throw DimensionError("rope_apply: one position per sequence slot required");
    const std::size_t half = hd / 2;
    std::vector<T> cs(seq * half), sn(seq * half);
    for (std::size_t s = 0; s < seq; ++s) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
            const double angle = static_cast<double>(positions[s]) * freq;
            cs[s * half + i] = static_cast<T>(std::cos(angle));
            sn[s * half + i] = static_cast<T>(std::sin(angle));
        }
    }
    std::vector<T> out(x.numel());
    for (std::size_t s = 0; s < seq; ++s)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < half; ++i) {
                const std::size_t o = (s * heads + h) * hd + 2 * i;
                const T c = cs[s * half + i], sv = sn[s * half + i];
                out[o] = x[o] * c - x[o + 1] * sv;
                out[o + 1] = x[o] * sv + x[o + 1] * c;
            }
    auto y = detail::make_output<T>(x.shape(), std::move(out), "rope_apply");
    if (detail::recording(x)) {
        detail::attach(y, [x, y, cs = std::move(cs), sn = std::move(sn), seq, heads, hd, half]() mutable {
            auto g = y.grad();
            auto gx = x.grad();
            for (std::size_t s = 0; s < seq; ++s)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t i = 0; i < half; ++i) {
                        const std::size_t o = (s * heads + h) * hd + 2 * i;
                        const T c = cs[s * half + i], sv = sn[s * half + i];
                        gx[o] += g[o] * c + g[o + 1] * sv;
                        gx[o + 1] += -g[o] * sv + g[o + 1] * c;
                    }
        });
    }
    return y;
}

// Scaled dot-product attention with grouped key/value heads.
// q: [seq x n_heads x hd], k, v: [seq x n_kv_heads x hd] -> [seq x n_heads x hd].
// Query head h reads key/value head h / (n_heads / n_kv_heads).
template <typename T>
Tensor<T> grouped_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionSpec& spec) {
    detail::require_dim(q, 3, "grouped_attention");
    detail::require_dim(k, 3, "grouped_attention");
    detail::require_same_shape(k, v, "grouped_attention");
    const std::size_t seq = q.extent(0), nh = q.extent(1), hd = q.extent(2), nkv = k.extent(1);
    if (k.extent(0) != seq || k.extent(2) != hd) throw DimensionError("grouped_attention: q/k shapes disagree");
    if (nh % nkv != 0) throw ConfigError("grouped_attention: n_heads not divisible by n_kv_heads");
    if (spec.size() != seq) {
        throw DimensionError(detail::cat("grouped_attention: mask covers ", spec.size(), " tokens, sequence has ", seq));
    }
    const std::size_t group = nh / nkv;
    const T scale_f = T(1) / std::sqrt(static_cast<T>(hd));
    // probs[h][i][j], only j in [window_start(i), i] is meaningful.
    auto probs = std::make_shared<std::vector<T>>(nh * seq * seq, T(0));
    std::vector<T> out(q.numel(), T(0));
    std::vector<T> row(seq);
    for (std::size_t h = 0; h < nh; ++h) {
        const std::size_t kh = h / group;
        for (std::size_t i = 0; i < seq; ++i) {
            if (spec.sample_ids()[i] < 0) continue;
            const T* qi = &q[(i * nh + h) * hd];
            const std::size_t j0 = spec.window_start(i);
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = j0; j <= i; ++j) {
                if (!spec.allowed(i, j)) continue;
                const T* kj = &k[(j * nkv + kh) * hd];
                T s = T(0);
                for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
                row[j] = s * scale_f;
                mx = std::max(mx, row[j]);
            }
            T z = T(0);
            T* p = &(*probs)[(h * seq + i) * seq];
            for (std::size_t j = j0; j <= i; ++j) {
                if (!spec.allowed(i, j)) continue;
                p[j] = std::exp(row[j] - mx);
                z += p[j];
            }
            T* oi = &out[(i * nh + h) * hd];
            for (std::size_t j = j0; j <= i; ++j) {
                if (!spec.allowed(i, j)) continue;
                p[j] /= z;
                const T* vj = &v[(j * nkv + kh) * hd];
                for (std::size_t c = 0; c < hd; ++c) oi[c] += p[j] * vj[c];
            }
        }
    }
    auto y = detail::make_output<T>(q.shape(), std::move(out), "grouped_attention");
    if (detail::recording(q, k, v)) {
        detail::attach(y, [q, k, v, y, spec, probs, seq, nh, nkv, hd, group, scale_f]() mutable {
            auto g = y.grad();
            std::vector<T> dq(q.numel(), T(0)), dk(k.numel(), T(0)), dv(v.numel(), T(0));
            std::vector<T> dp(seq);
            for (std::size_t h = 0; h < nh; ++h) {
                const std::size_t kh = h / group;
                for (std::size_t i = 0; i < seq; ++i) {
                    if (spec.sample_ids()[i] < 0) continue;
                    const T* gi = &g[(i * nh + h) * hd];
                    const T* p = &(*probs)[(h * seq + i) * seq];
                    const std::size_t j0 = spec.window_start(i);
                    T weighted = T(0);
                    for (std::size_t j = j0; j <= i; ++j) {
                        if (!spec.allowed(i, j)) continue;
                        const T* vj = &v[(j * nkv + kh) * hd];
                        T s = T(0);
                        for (std::size_t c = 0; c < hd; ++c) s += gi[c] * vj[c];
                        dp[j] = s;
                        weighted += p[j] * s;
                    }
                    const T* qi = &q[(i * nh + h) * hd];
                    T* dqi = &dq[(i * nh + h) * hd];
                    for (std::size_t j = j0; j <= i; ++j) {
                        if (!spec.allowed(i, j)) continue;
                        const T ds = p[j] * (dp[j] - weighted) * scale_f;
                        const T* kj = &k[(j * nkv + kh) * hd];
                        T* dkj = &dk[(j * nkv + kh) * hd];
                        T* dvj = &dv[(j * nkv + kh) * hd];
                        for (std::size_t c = 0; c < hd; ++c) {
                            dqi[c] += ds * kj[c];
                            dkj[c] += ds * qi[c];
                            dvj[c] += p[j] * gi[c];
                        }
                    }
                }
            }
            auto acc = [](const Tensor<T>& t, const std::vector<T>& d) {
                if (!t.requires_grad()) return;
                auto gt = t.grad();
                for (std::size_t i = 0; i < d.size(); ++i) gt[i] += d[i];
            };
            acc(q, dq);
            acc(k, dk);
            acc(v, dv);
        });
    }
    return y;
}

template <typename T>
struct LossSum {
    Tensor<T> sum;      // scalar, sum of per-token NLL over weighted tokens
    double count = 0;   // number of loss-bearing tokens
};

// Summed next-token negative log-likelihood. Weights must be 0 or 1; returns
// nullopt when no token carries weight so that callers can tell an empty
// loss apart from a zero one. Normalization is left to the optimizer.
template <typename T>
std::optional<LossSum<T>> lm_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                                           std::span<const double> weights) {
    detail::require_dim(logits, 2, "lm_cross_entropy");
    const std::size_t seq = logits.extent(0), vocab = logits.extent(1);
    if (targets.size() != seq || weights.size() != seq) {
        throw DimensionError("lm_cross_entropy: targets/weights must align with logits rows");
    }
    double count = 0;
    for (std::size_t t = 0; t < seq; ++t) {
        if (weights[t] != 0.0 && weights[t] != 1.0) throw InputError("lm_cross_entropy: weights must be 0 or 1");
        if (weights[t] != 0.0 && (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= vocab)) {
            throw InputError(detail::cat("lm_cross_entropy: target ", targets[t], " outside vocab ", vocab));
        }
        count += weights[t];
    }
    if (count == 0) return std::nullopt;
    std::vector<T> lse(seq, T(0));
    T total = T(0);
    for (std::size_t t = 0; t < seq; ++t) {
        if (weights[t] == 0.0) continue;
        const T* row = &logits[t * vocab];
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t i = 0; i < vocab; ++i) mx = std::max(mx, row[i]);
        T z = T(0);
        for (std::size_t i = 0; i < vocab; ++i) z += std::exp(row[i] - mx);
        lse[t] = mx + std::log(z);
        total += lse[t] - row[targets[t]];
    }
    auto y = detail::make_output<T>({}, {total}, "lm_cross_entropy");
    if (detail::recording(logits)) {
        std::vector<std::int32_t> tg(targets.begin(), targets.end());
        std::vector<double> w(weights.begin(), weights.end());
        detail::attach(y, [logits, y, tg = std::move(tg), w = std::move(w), lse = std::move(lse), seq, vocab]() mutable {
            const T g = y.grad()[0];
            auto gl = logits.grad();
            for (std::size_t t = 0; t < seq; ++t) {
                if (w[t] == 0.0) continue;
                for (std::size_t i = 0; i < vocab; ++i) gl[t * vocab + i] += g * std::exp(logits[t * vocab + i] - lse[t]);
                gl[t * vocab + static_cast<std::size_t>(tg[t])] -= g;
            }
        });
    }
    return LossSum<T>{y, count};
}

}  // namespace deskmoe

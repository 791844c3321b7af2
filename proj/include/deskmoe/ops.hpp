// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable tensor ops. Every op validates shapes, computes eagerly,
// rejects non-finite results, and records its backward closure on the active
// tape when any input requires a gradient. Broadcasting is limited to leading
// batch dimensions (matmul, row-wise reductions); everything else needs
// explicit reshapes.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "deskmoe/errors.hpp"
#include "deskmoe/tensor.hpp"

namespace deskmoe {

namespace detail {

template <typename... Ts>
bool recording(const Ts&... ins) {
    return current_tape() != nullptr && (ins.requires_grad() || ...);
}

template <typename T>
Tensor<T> make_output(Shape shape, std::vector<T> values, const char* op) {
    if (!all_finite<T>(values)) throw NumericError(std::string(op) + ": non-finite result");
    return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T, typename Fn>
void attach(Tensor<T>& out, Fn&& fn) {
    out.set_requires_grad(true);
    current_tape()->record(out, std::forward<Fn>(fn));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(cat(op, ": shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
    }
}

template <typename T>
void require_dim(const Tensor<T>& a, std::size_t d, const char* op) {
    if (a.dim() != d) throw DimensionError(cat(op, ": expected ", d, "-d tensor, got ", shape_str(a.shape())));
}

// Treats `a` as rows x last-extent.
template <typename T>
std::pair<std::size_t, std::size_t> as_rows(const Tensor<T>& a, const char* op) {
    if (a.dim() == 0) throw DimensionError(cat(op, ": needs at least one axis"));
    const std::size_t cols = a.shape().back();
    return {a.numel() / cols, cols};
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& a, const char* op, Fwd fwd, Deriv deriv) {
    std::vector<T> out(a.numel());
    auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
    auto y = make_output<T>(a.shape(), std::move(out), op);
    if (recording(a)) {
        attach(y, [a, y, deriv]() mutable {
            auto g = y.grad();
            auto ga = a.grad();
            auto xv = a.data();
            auto yv = y.data();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(xv[i], yv[i]);
        });
    }
    return y;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    auto y = detail::make_output<T>(a.shape(), std::move(out), "add");
    if (detail::recording(a, b)) {
        detail::attach(y, [a, b, y]() mutable {
            auto g = y.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    auto y = detail::make_output<T>(a.shape(), std::move(out), "sub");
    if (detail::recording(a, b)) {
        detail::attach(y, [a, b, y]() mutable {
            auto g = y.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    auto y = detail::make_output<T>(a.shape(), std::move(out), "mul");
    if (detail::recording(a, b)) {
        detail::attach(y, [a, b, y]() mutable {
            auto g = y.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    return detail::unary(a, "scale", [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return scale(a, T(-1));
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    return detail::unary(a, "add_scalar", [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    return detail::unary(a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    return detail::unary(a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    for (auto v : a.data()) {
        if (!(v > T(0))) throw NumericError("log: non-positive input");
    }
    return detail::unary(a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return detail::unary(
        a, "sigmoid",
        [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
        [](T, T y) { return y * (T(1) - y); });
}

// log(sigmoid(x)) = -softplus(-x), evaluated without overflow.
template <typename T>
Tensor<T> log_sigmoid(const Tensor<T>& a) {
    return detail::unary(
        a, "log_sigmoid",
        [](T x) { return x >= T(0) ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); },
        [](T x, T) { return x >= T(0) ? std::exp(-x) / (T(1) + std::exp(-x)) : T(1) / (T(1) + std::exp(x)); });
}

// x * sigmoid(x)
template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
    auto sig = [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); };
    return detail::unary(
        a, "silu", [sig](T x) { return x * sig(x); },
        [sig](T x, T) {
            const T s = sig(x);
            return s * (T(1) + x * (T(1) - s));
        });
}

// ----------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = T(0);
    for (auto v : a.data()) acc += v;
    auto y = detail::make_output<T>({}, {acc}, "sum");
    if (detail::recording(a)) {
        detail::attach(y, [a, y]() mutable {
            const T g = y.grad()[0];
            for (auto& ga : a.grad()) ga += g;
        });
    }
    return y;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
    return sum(mul(a, b));
}

// Sum over the leading axis of a [B x N] tensor -> [N].
template <typename T>
Tensor<T> sum_rows(const Tensor<T>& a) {
    detail::require_dim(a, 2, "sum_rows");
    const std::size_t rows = a.extent(0), cols = a.extent(1);
    std::vector<T> out(cols, T(0));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c] += a[r * cols + c];
    auto y = detail::make_output<T>({cols}, std::move(out), "sum_rows");
    if (detail::recording(a)) {
        detail::attach(y, [a, y, rows, cols]() mutable {
            auto g = y.grad();
            auto ga = a.grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[c];
        });
    }
    return y;
}

// Packs scalars into a 1-d tensor.
template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& scalars) {
    if (scalars.empty()) throw DimensionError("stack: no inputs");
    std::vector<T> out;
    out.reserve(scalars.size());
    bool any_grad = false;
    for (const auto& s : scalars) {
        if (s.numel() != 1) throw DimensionError("stack: inputs must be scalars");
        out.push_back(s[0]);
        any_grad = any_grad || s.requires_grad();
    }
    auto y = detail::make_output<T>({scalars.size()}, std::move(out), "stack");
    if (current_tape() && any_grad) {
        detail::attach(y, [scalars, y]() mutable {
            auto g = y.grad();
            for (std::size_t i = 0; i < scalars.size(); ++i) {
                auto s = scalars[i];
                if (s.requires_grad()) s.grad()[0] += g[i];
            }
        });
    }
    return y;
}

// --------------------------------------------------------------------- shape

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError(detail::cat("reshape: ", shape_str(a.shape()), " -> ", shape_str(shape)));
    }
    auto y = detail::make_output<T>(std::move(shape), a.values(), "reshape");
    if (detail::recording(a)) {
        detail::attach(y, [a, y]() mutable {
            auto g = y.grad();
            auto ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
    }
    return y;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require_dim(a, 2, "transpose");
    const std::size_t m = a.extent(0), n = a.extent(1);
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
    auto y = detail::make_output<T>({n, m}, std::move(out), "transpose");
    if (detail::recording(a)) {
        detail::attach(y, [a, y, m, n]() mutable {
            auto g = y.grad();
            auto ga = a.grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    }
    return y;
}

// Changes precision. The gradient is cast back on the way down.
template <typename U, typename T>
Tensor<U> cast(const Tensor<T>& a) {
    std::vector<U> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(a[i]);
    auto y = detail::make_output<U>(a.shape(), std::move(out), "cast");
    if (detail::recording(a)) {
        y.set_requires_grad(true);
        current_tape()->record(y, [a, y]() mutable {
            auto g = y.grad();
            auto ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += static_cast<T>(g[i]);
        });
    }
    return y;
}

// -------------------------------------------------------------------- matmul

namespace detail {

// c[m x n] += a[m x k] * b[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
    for (std::size_t i = 0; i < m; ++i) {
        T* ci = c + i * n;
        const T* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = ai[p];
            if (av == T(0)) continue;
            const T* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c[m x k] += a[m x n] * b[k x n]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a + i * n;
        T* ci = c + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T* bp = b + p * n;
            T acc = T(0);
            for (std::size_t j = 0; j < n; ++j) acc += ai[j] * bp[j];
            ci[p] += acc;
        }
    }
}

// c[k x n] += a[m x k]^T * b[m x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        const T* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = ai[p];
            if (av == T(0)) continue;
            T* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

}  // namespace detail

// a[... x k] * b[k x n] -> [... x n]; leading axes of `a` are batch rows.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_dim(b, 2, "matmul");
    auto [m, k] = detail::as_rows(a, "matmul");
    if (k != b.extent(0)) {
        throw DimensionError(
            detail::cat("matmul: inner extents differ, ", shape_str(a.shape()), " * ", shape_str(b.shape())));
    }
    const std::size_t n = b.extent(1);
    std::vector<T> out(m * n, T(0));
    detail::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
    Shape shape = a.shape();
    shape.back() = n;
    auto y = detail::make_output<T>(std::move(shape), std::move(out), "matmul");
    if (detail::recording(a, b)) {
        detail::attach(y, [a, b, y, m = m, k = k, n]() mutable {
            auto g = y.grad();
            if (a.requires_grad()) detail::gemm_nt(m, n, k, g.data(), b.data().data(), a.grad().data());
            if (b.requires_grad()) detail::gemm_tn(m, k, n, a.data().data(), g.data(), b.grad().data());
        });
    }
    return y;
}

// ------------------------------------------------------------------- softmax

// Softmax along `axis` with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.dim()) throw DimensionError(detail::cat("softmax: axis ", axis, " out of range"));
    const std::size_t n = x.extent(axis);
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < x.dim(); ++d) inner *= x.extent(d);
    const std::size_t outer = x.numel() / (n * inner);
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
            T z = T(0);
            for (std::size_t i = 0; i < n; ++i) {
                const T e = std::exp(x[base + i * inner] - mx);
                out[base + i * inner] = e;
                z += e;
            }
            for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= z;
        }
    }
    auto y = detail::make_output<T>(x.shape(), std::move(out), "softmax");
    if (detail::recording(x)) {
        detail::attach(y, [x, y, n, inner, outer]() mutable {
            auto g = y.grad();
            auto gx = x.grad();
            auto yv = y.data();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * n * inner + in;
                    T dotp = T(0);
                    for (std::size_t i = 0; i < n; ++i) dotp += g[base + i * inner] * yv[base + i * inner];
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t idx = base + i * inner;
                        gx[idx] += yv[idx] * (g[idx] - dotp);
                    }
                }
            }
        });
    }
    return y;
}

// log-sum-exp over the last axis: [... x n] -> [...] (scalar for 1-d input).
template <typename T>
Tensor<T> logsumexp(const Tensor<T>& x) {
    auto [rows, n] = detail::as_rows(x, "logsumexp");
    std::vector<T> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[r * n + i]);
        T z = T(0);
        for (std::size_t i = 0; i < n; ++i) z += std::exp(x[r * n + i] - mx);
        out[r] = mx + std::log(z);
    }
    Shape shape(x.shape().begin(), x.shape().end() - 1);
    auto y = detail::make_output<T>(std::move(shape), std::move(out), "logsumexp");
    if (detail::recording(x)) {
        detail::attach(y, [x, y, rows = rows, n = n]() mutable {
            auto g = y.grad();
            auto gx = x.grad();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += g[r] * std::exp(x[r * n + i] - y[r]);
            }
        });
    }
    return y;
}

// ------------------------------------------------------------ gather/scatter

// rows of a [V x d] table -> [ids.size() x d]. Used for embeddings and for
// routing token subsets to experts.
template <typename T>
Tensor<T> index_rows(const Tensor<T>& table, std::span<const std::size_t> ids) {
    detail::require_dim(table, 2, "index_rows");
    const std::size_t rows = table.extent(0), d = table.extent(1);
    if (ids.empty()) throw DimensionError("index_rows: empty index list");
    std::vector<T> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= rows) throw InputError(detail::cat("index_rows: row ", ids[i], " >= ", rows));
        std::copy_n(table.data().begin() + ids[i] * d, d, out.begin() + i * d);
    }
    auto y = detail::make_output<T>({ids.size(), d}, std::move(out), "index_rows");
    if (detail::recording(table)) {
        std::vector<std::size_t> idx(ids.begin(), ids.end());
        detail::attach(y, [table, y, idx = std::move(idx), d]() mutable {
            auto g = y.grad();
            auto gt = table.grad();
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t c = 0; c < d; ++c) gt[idx[i] * d + c] += g[i * d + c];
        });
    }
    return y;
}

// Inverse of index_rows: adds src row i into output row ids[i].
template <typename T>
Tensor<T> scatter_add_rows(const Tensor<T>& src, std::span<const std::size_t> ids, std::size_t n_rows) {
    detail::require_dim(src, 2, "scatter_add_rows");
    const std::size_t d = src.extent(1);
    if (ids.size() != src.extent(0)) throw DimensionError("scatter_add_rows: index count differs from rows");
    std::vector<T> out(n_rows * d, T(0));
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= n_rows) throw InputError(detail::cat("scatter_add_rows: row ", ids[i], " >= ", n_rows));
        for (std::size_t c = 0; c < d; ++c) out[ids[i] * d + c] += src[i * d + c];
    }
    auto y = detail::make_output<T>({n_rows, d}, std::move(out), "scatter_add_rows");
    if (detail::recording(src)) {
        std::vector<std::size_t> idx(ids.begin(), ids.end());
        detail::attach(y, [src, y, idx = std::move(idx), d]() mutable {
            auto g = y.grad();
            auto gs = src.grad();
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t c = 0; c < d; ++c) gs[i * d + c] += g[idx[i] * d + c];
        });
    }
    return y;
}

// Picks x[rows[i], cols[i]] from a 2-d tensor -> [rows.size()].
template <typename T>
Tensor<T> gather_elems(const Tensor<T>& x, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
    detail::require_dim(x, 2, "gather_elems");
    if (rows.size() != cols.size() || rows.empty()) throw DimensionError("gather_elems: index lists differ");
    const std::size_t n = x.extent(1);
    std::vector<std::size_t> flat(rows.size());
    std::vector<T> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= x.extent(0) || cols[i] >= n) throw InputError("gather_elems: index out of range");
        flat[i] = rows[i] * n + cols[i];
        out[i] = x[flat[i]];
    }
    auto y = detail::make_output<T>({rows.size()}, std::move(out), "gather_elems");
    if (detail::recording(x)) {
        detail::attach(y, [x, y, flat = std::move(flat)]() mutable {
            auto g = y.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < flat.size(); ++i) gx[flat[i]] += g[i];
        });
    }
    return y;
}

// Multiplies row i of x[M x d] by w[i].
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const Tensor<T>& w) {
    detail::require_dim(x, 2, "scale_rows");
    const std::size_t m = x.extent(0), d = x.extent(1);
    if (w.numel() != m) throw DimensionError("scale_rows: weight count differs from rows");
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < d; ++c) out[i * d + c] = x[i * d + c] * w[i];
    auto y = detail::make_output<T>(x.shape(), std::move(out), "scale_rows");
    if (detail::recording(x, w)) {
        detail::attach(y, [x, w, y, m, d]() mutable {
            auto g = y.grad();
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t c = 0; c < d; ++c) gx[i * d + c] += g[i * d + c] * w[i];
            }
            if (w.requires_grad()) {
                auto gw = w.grad();
                for (std::size_t i = 0; i < m; ++i) {
                    T acc = T(0);
                    for (std::size_t c = 0; c < d; ++c) acc += g[i * d + c] * x[i * d + c];
                    gw[i] += acc;
                }
            }
        });
    }
    return y;
}

// Multiplies every row of x[... x d] elementwise by w[d].
template <typename T>
Tensor<T> mul_cols(const Tensor<T>& x, const Tensor<T>& w) {
    auto [m, d] = detail::as_rows(x, "mul_cols");
    if (w.numel() != d) throw DimensionError("mul_cols: weight length differs from last extent");
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < d; ++c) out[i * d + c] = x[i * d + c] * w[c];
    auto y = detail::make_output<T>(x.shape(), std::move(out), "mul_cols");
    if (detail::recording(x, w)) {
        detail::attach(y, [x, w, y, m = m, d = d]() mutable {
            auto g = y.grad();
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t c = 0; c < d; ++c) gx[i * d + c] += g[i * d + c] * w[c];
            }
            if (w.requires_grad()) {
                auto gw = w.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t c = 0; c < d; ++c) gw[c] += g[i * d + c] * x[i * d + c];
            }
        });
    }
    return y;
}

}  // namespace deskmoe

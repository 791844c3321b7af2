// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors and the reverse-mode gradient tape.
//
// A Tensor is a shared handle onto storage (shape, values, gradient). Ops in
// ops.hpp compute eagerly and, when a Tape is active on the calling thread and
// at least one input requires a gradient, append a backward closure to that
// tape. Tape::backward replays the closures in exact reverse order.
//
// Gradient semantics: leaf tensors (those not produced by a recorded op)
// accumulate across backward calls until zero_grad() is called. Intermediate
// gradients are reset at the start of every backward pass, so calling backward
// twice on the same tape adds exactly one more copy of d(loss)/d(leaf).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "deskmoe/errors.hpp"

namespace deskmoe {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <typename T>
struct TensorStorage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
};

template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : s_(std::make_shared<TensorStorage<T>>()) {
        for (auto e : shape) {
            if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        }
        if (shape_numel(shape) != values.size()) {
            throw DimensionError(detail::cat("shape ", shape_str(shape), " needs ", shape_numel(shape),
                                             " values, got ", values.size()));
        }
        s_->shape = std::move(shape);
        s_->data = std::move(values);
        s_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) { return Tensor({}, {value}, requires_grad); }

    bool defined() const { return static_cast<bool>(s_); }

    const Shape& shape() const { return s_->shape; }
    std::size_t dim() const { return s_->shape.size(); }
    std::size_t extent(std::size_t axis) const { return s_->shape.at(axis); }
    std::size_t numel() const { return s_->data.size(); }

    std::span<T> data() { return s_->data; }
    std::span<const T> data() const { return s_->data; }
    std::vector<T>& values() { return s_->data; }
    const std::vector<T>& values() const { return s_->data; }

    T& operator[](std::size_t i) { return s_->data[i]; }
    const T& operator[](std::size_t i) const { return s_->data[i]; }

    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return s_->data[0];
    }

    bool requires_grad() const { return s_ && s_->requires_grad; }
    const Tensor& set_requires_grad(bool flag) const {
        s_->requires_grad = flag;
        return *this;
    }

    bool has_grad() const { return !s_->grad.empty(); }
    // Gradient buffers are written through shared handles during backward,
    // so a const handle still yields a mutable span.
    std::span<T> grad() const {
        ensure_grad();
        return s_->grad;
    }
    void ensure_grad() const {
        if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    }
    void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), T(0)); }
    void drop_grad() { std::vector<T>().swap(s_->grad); }

    // Same storage (identity), not value equality.
    bool same(const Tensor& other) const { return s_ == other.s_; }

    Tensor detach() const { return Tensor(shape(), values(), false); }

    std::shared_ptr<TensorStorage<T>> storage() const { return s_; }

   private:
    std::shared_ptr<TensorStorage<T>> s_;
};

template <typename T>
bool all_finite(std::span<const T> xs) {
    return std::all_of(xs.begin(), xs.end(), [](T v) { return std::isfinite(v); });
}

// Ordered record of executed ops. Not thread-safe; each worker owns its tape.
class Tape {
   public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    template <typename T>
    void record(const Tensor<T>& output, std::function<void()> backward_fn) {
        auto storage = output.storage();
        entries_.push_back(Entry{std::move(backward_fn), [storage] {
                                     auto& g = storage->grad;
                                     if (g.empty()) g.assign(storage->data.size(), T(0));
                                     else std::fill(g.begin(), g.end(), T(0));
                                 }});
    }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    void clear() { entries_.clear(); }

    template <typename T>
    void backward(Tensor<T> loss) {
        if (!loss.defined() || loss.numel() != 1) {
            throw ContractError("backward() needs a scalar loss, got " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
        }
        if (entries_.empty()) throw ContractError("backward() on an empty tape");
        if (!loss.requires_grad()) throw ContractError("backward() on a loss that does not require grad");
        for (auto& e : entries_) e.zero_output();
        loss.grad()[0] += T(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
    }

   private:
    struct Entry {
        std::function<void()> backward;
        std::function<void()> zero_output;
    };
    std::vector<Entry> entries_;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;
}

inline Tape* current_tape() { return detail::active_tape; }

// Makes `tape` the recording target for ops on this thread until destruction.
class TapeScope {
   public:
    explicit TapeScope(Tape& tape) : previous_(detail::active_tape) { detail::active_tape = &tape; }
    ~TapeScope() { detail::active_tape = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

   private:
    Tape* previous_;
};

// Suspends recording (evaluation passes).
class NoGradScope {
   public:
    NoGradScope() : previous_(detail::active_tape) { detail::active_tape = nullptr; }
    ~NoGradScope() { detail::active_tape = previous_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

   private:
    Tape* previous_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
    Tape* tape = current_tape();
    if (!tape) throw ContractError("backward() without an active tape");
    tape->backward(loss);
}

}  // namespace deskmoe

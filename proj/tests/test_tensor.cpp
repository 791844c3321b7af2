// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include "deskmoe/ops.hpp"
#include "deskmoe/rng.hpp"
#include "deskmoe/tensor.hpp"
#include "support/gradcheck.hpp"

using namespace deskmoe;
using deskmoe::testing::gradcheck;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.normal(0.0, scale);
    return Tensor<double>(std::move(shape), std::move(v), true);
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
    EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), DimensionError);
    EXPECT_THROW(Tensor<double>({0, 3}, {}), DimensionError);
    Tensor<double> t({2, 3}, std::vector<double>(6, 1.0));
    EXPECT_EQ(t.numel(), 6u);
}

TEST(Matmul, IdentityAndHandArithmetic) {
    Tensor<double> eye({2, 2}, {1, 0, 0, 1});
    Tensor<double> m({2, 2}, {1, 2, 3, 4});
    auto c = matmul(eye, m);
    EXPECT_EQ(c.values(), (std::vector<double>{1, 2, 3, 4}));

    Tensor<double> a({1, 2}, {1, 2});
    Tensor<double> b({2, 1}, {3, 4});
    EXPECT_DOUBLE_EQ(matmul(a, b).item(), 11.0);
}

TEST(Matmul, ShapeMismatchIsDimensionError) {
    Tensor<double> a({2, 3}, std::vector<double>(6, 1.0));
    Tensor<double> b({2, 2}, std::vector<double>(4, 1.0));
    EXPECT_THROW(matmul(a, b), DimensionError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    Rng rng(7);
    auto a = random_tensor({5, 7}, rng);
    auto b = random_tensor({7, 3}, rng);
    auto w = random_tensor({5, 3}, rng).detach();
    auto r = gradcheck([&] { return sum(mul(matmul(a, b), w)); }, {a, b});
    EXPECT_LE(r.max_rel_err, 1e-6) << r.worst;
}

TEST(Softmax, SymmetricAndOverflowSafe) {
    auto s = softmax(Tensor<double>({2}, {0, 0}), 0);
    EXPECT_DOUBLE_EQ(s[0], 0.5);
    EXPECT_DOUBLE_EQ(s[1], 0.5);
    auto big = softmax(Tensor<double>({2}, {1000, 1000}), 0);
    EXPECT_DOUBLE_EQ(big[0], 0.5);
    EXPECT_DOUBLE_EQ(big[1], 0.5);
}

TEST(Softmax, MatchesExtendedPrecisionEvaluation) {
    auto s = softmax(Tensor<double>({3}, {1, 2, 3}), 0);
    long double z = 0;
    for (int i = 1; i <= 3; ++i) z += std::exp(static_cast<long double>(i));
    for (int i = 0; i < 3; ++i) {
        const long double expected = std::exp(static_cast<long double>(i + 1)) / z;
        EXPECT_NEAR(s[i], static_cast<double>(expected), 1e-15);
    }
}

TEST(Softmax, RowsSumToOneOnAnyAxis) {
    Rng rng(3);
    auto x = random_tensor({3, 4, 5}, rng, 3.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
        auto y = softmax(x, axis);
        const std::size_t n = x.extent(axis);
        std::size_t inner = 1;
        for (std::size_t d = axis + 1; d < 3; ++d) inner *= x.extent(d);
        for (std::size_t o = 0; o < x.numel() / (n * inner); ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                double s = 0;
                for (std::size_t i = 0; i < n; ++i) s += y[o * n * inner + i * inner + in];
                EXPECT_NEAR(s, 1.0, 1e-12);
            }
    }
}

TEST(Backward, SumAndSquareHaveAnalyticGradients) {
    Tensor<double> p({2, 3}, std::vector<double>(6, 0.5), true);
    {
        Tape tape;
        TapeScope scope(tape);
        tape.backward(sum(p));
    }
    for (auto g : p.grad()) EXPECT_DOUBLE_EQ(g, 1.0);

    Tensor<double> q({2}, {1, 2}, true);
    {
        Tape tape;
        TapeScope scope(tape);
        tape.backward(sum(square(q)));
    }
    EXPECT_DOUBLE_EQ(q.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(q.grad()[1], 4.0);
}

TEST(Backward, RepeatedCallsAccumulateIntoLeaves) {
    Tensor<double> q({2}, {1, 2}, true);
    Tape tape;
    TapeScope scope(tape);
    auto loss = sum(square(q));
    tape.backward(loss);
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(q.grad()[0], 4.0);
    EXPECT_DOUBLE_EQ(q.grad()[1], 8.0);
    q.zero_grad();
    tape.backward(loss);
    EXPECT_DOUBLE_EQ(q.grad()[1], 4.0);
}

TEST(Backward, RejectsNonScalarLossAndEmptyTape) {
    Tensor<double> q({2}, {1, 2}, true);
    Tape tape;
    TapeScope scope(tape);
    EXPECT_THROW(tape.backward(q), ContractError);
    auto y = square(q);
    EXPECT_THROW(tape.backward(y), ContractError);
    Tape empty;
    EXPECT_THROW(empty.backward(Tensor<double>::scalar(1.0, true)), ContractError);
}

TEST(Backward, IsLinearInTheLoss) {
    Rng rng(11);
    auto p = random_tensor({4, 3}, rng);
    auto w = random_tensor({3, 2}, rng).detach();
    auto l1 = [&] { return sum(square(matmul(p, w))); };
    auto l2 = [&] { return sum(exp(scale(p, 0.3))); };
    auto grad_of = [&](const std::function<Tensor<double>()>& f) {
        p.ensure_grad();
        p.zero_grad();
        Tape tape;
        TapeScope scope(tape);
        tape.backward(f());
        return std::vector<double>(p.grad().begin(), p.grad().end());
    };
    const double a = 2.5, b = -0.75;
    auto g1 = grad_of(l1);
    auto g2 = grad_of(l2);
    auto g = grad_of([&] { return add(scale(l1(), a), scale(l2(), b)); });
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], a * g1[i] + b * g2[i], 1e-12 * (1 + std::abs(g[i])));
}

TEST(Ops, NonFiniteResultIsNumericError) {
    Tensor<double> x({1}, {1000.0});
    EXPECT_THROW(exp(x), NumericError);
    EXPECT_THROW(log(Tensor<double>({1}, {-1.0})), NumericError);
}

TEST(Ops, EveryDifferentiableOpPassesGradientCheck) {
    Rng rng(5);
    auto x = random_tensor({3, 4}, rng);
    auto y = random_tensor({3, 4}, rng);
    auto w = random_tensor({4}, rng);
    auto r = random_tensor({3}, rng);
    auto pos = Tensor<double>({3, 4}, std::vector<double>(12, 0.0), true);
    for (std::size_t i = 0; i < 12; ++i) pos[i] = 0.5 + rng.uniform();
    const std::vector<std::size_t> rows{2, 0, 2};
    const std::vector<std::size_t> cols{1, 3, 0};
    const std::vector<std::pair<const char*, std::function<Tensor<double>()>>> cases = {
        {"add", [&] { return sum(square(add(x, y))); }},
        {"sub", [&] { return sum(square(sub(x, y))); }},
        {"mul", [&] { return sum(mul(x, y)); }},
        {"sigmoid", [&] { return sum(mul(sigmoid(x), y)); }},
        {"log_sigmoid", [&] { return sum(mul(log_sigmoid(x), y)); }},
        {"silu", [&] { return sum(mul(silu(x), y)); }},
        {"exp", [&] { return sum(mul(exp(x), y)); }},
        {"log", [&] { return sum(mul(log(pos), y)); }},
        {"softmax0", [&] { return sum(mul(softmax(x, 0), y)); }},
        {"softmax1", [&] { return sum(mul(softmax(x, 1), y)); }},
        {"logsumexp", [&] { return sum(mul(logsumexp(x), r)); }},
        {"transpose", [&] { return sum(mul(transpose(transpose(x)), y)); }},
        {"reshape", [&] { return sum(mul(reshape(x, {4, 3}), reshape(y, {4, 3}))); }},
        {"sum_rows", [&] { return sum(mul(sum_rows(x), w)); }},
        {"mul_cols", [&] { return sum(mul(mul_cols(x, w), y)); }},
        {"scale_rows", [&] { return sum(mul(scale_rows(x, r), y)); }},
        {"index_rows", [&] { return sum(square(index_rows(x, rows))); }},
        {"scatter_add_rows", [&] { return sum(mul(scatter_add_rows(x, rows, 3), y)); }},
        {"gather_elems", [&] { return sum(mul(gather_elems(x, rows, cols), r)); }},
        {"stack", [&] { return sum(square(stack<double>({sum(x), dot(x, y)}))); }},
    };
    for (const auto& [name, fn] : cases) {
        auto res = gradcheck(fn, {x, y, w, r, pos});
        EXPECT_LE(res.max_rel_err, 1e-5) << name << " " << res.worst;
    }
}

TEST(Ops, CastRoundTripsGradients) {
    Tensor<float> x({3}, {1.0f, -2.0f, 0.5f}, true);
    Tape tape;
    TapeScope scope(tape);
    auto y = sum(square(cast<double>(x)));
    tape.backward(y);
    EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
    EXPECT_FLOAT_EQ(x.grad()[1], -4.0f);
}

TEST(Determinism, SameSeedSameBits) {
    auto run = [] {
        Rng rng(42);
        auto a = random_tensor({6, 5}, rng);
        auto b = random_tensor({5, 4}, rng);
        return softmax(matmul(a, b), 1).values();
    };
    EXPECT_EQ(run(), run());
}

TEST(Concurrency, DistinctTapesOnDistinctThreads) {
    auto work = [](double seed_val, double* out) {
        Tensor<double> p({3}, {seed_val, 2.0, 3.0}, true);
        Tape tape;
        TapeScope scope(tape);
        tape.backward(sum(square(p)));
        *out = p.grad()[0];
    };
    double g1 = 0, g2 = 0;
    std::thread t1(work, 1.0, &g1);
    std::thread t2(work, 5.0, &g2);
    t1.join();
    t2.join();
    EXPECT_DOUBLE_EQ(g1, 2.0);
    EXPECT_DOUBLE_EQ(g2, 10.0);
}

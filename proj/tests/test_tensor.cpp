// Copyright (c) 2026, The MoLA Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "mola/gradcheck.hpp"
#include "mola/ops.hpp"
#include "mola/random.hpp"
#include "mola/tensor.hpp"
#include "oracles.hpp"

using namespace mola;

namespace {

TensorF tf(const Shape& s, std::vector<float> v, bool g = false) { return TensorF::from(s, std::move(v), g); }

}  // namespace

TEST(Tensor, ShapeInvariants) {
    auto t = TensorF::zeros({2, 3, 4});
    EXPECT_EQ(t.numel(), 24u);
    EXPECT_EQ(t.rank(), 3u);
    EXPECT_FALSE(t.has_grad());
    EXPECT_THROW(TensorF::zeros({2, 0}), DimensionError);
    EXPECT_THROW(tf({2, 2}, {1, 2, 3}), DimensionError);
    EXPECT_THROW(t.dim(3), DimensionError);
    EXPECT_THROW(TensorF{}.shape(), ContractError);
}

TEST(Tensor, CloneAndDetachAreIndependent) {
    auto a = tf({2}, {1, 2}, true);
    auto c = a.clone();
    auto d = a.detach();
    c.mutable_data()[0] = 5;
    EXPECT_EQ(a.data()[0], 1.0f);
    EXPECT_TRUE(c.requires_grad());
    EXPECT_FALSE(d.requires_grad());
}

TEST(Matmul, IdentityAndOrthogonal) {
    auto eye = tf({2, 2}, {1, 0, 0, 1});
    auto m = tf({2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(matmul(eye, m).to_vector(), (std::vector<float>{1, 2, 3, 4}));
    EXPECT_EQ(matmul(tf({1, 2}, {1, 0}), tf({2, 1}, {0, 5})).to_vector(), std::vector<float>{0});
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    try {
        matmul(TensorF::zeros({2, 3}), TensorF::zeros({2, 3}));
        FAIL();
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    }
}

TEST(Matmul, MatchesTripleLoopIncludingGradients) {
    Rng rng(0);
    auto a = oracle::random_tensor<float>(rng, {3, 4}, true);
    auto b = oracle::random_tensor<float>(rng, {4, 2}, true);
    auto g = oracle::random_vec(rng, 6);
    auto y = matmul(a, b);
    EXPECT_LT(oracle::max_abs_diff(oracle::values(y), oracle::matmul(oracle::values(a), oracle::values(b), 3, 4, 2)),
              1e-6);
    // loss = Σ y ⊙ G gives dA = G·Bᵀ, dB = Aᵀ·G
    backward(sum(mul(y, tf({3, 2}, std::vector<float>(g.begin(), g.end())))));
    const auto gf = oracle::to_double<float>(tf({3, 2}, std::vector<float>(g.begin(), g.end())).data());
    EXPECT_LT(oracle::max_abs_diff(oracle::grads(a), oracle::matmul(gf, oracle::transpose(oracle::values(b), 4, 2), 3, 2, 4)),
              1e-6);
    EXPECT_LT(oracle::max_abs_diff(oracle::grads(b), oracle::matmul(oracle::transpose(oracle::values(a), 3, 4), gf, 4, 3, 2)),
              1e-6);
}

TEST(Bmm, MatchesPerBatchTripleLoop) {
    Rng rng(7);
    auto a = oracle::random_tensor<double>(rng, {3, 2, 4});
    auto b = oracle::random_tensor<double>(rng, {3, 4, 5});
    auto y = oracle::values(bmm(a, b));
    const auto av = oracle::values(a), bv = oracle::values(b);
    for (std::size_t i = 0; i < 3; ++i) {
        const auto ref = oracle::matmul(oracle::Vec(av.begin() + i * 8, av.begin() + i * 8 + 8),
                                        oracle::Vec(bv.begin() + i * 20, bv.begin() + i * 20 + 20), 2, 4, 5);
        EXPECT_LT(oracle::max_abs_diff(oracle::Vec(y.begin() + i * 10, y.begin() + i * 10 + 10), ref), 1e-12);
    }
    EXPECT_THROW(bmm(TensorD::zeros({2, 2, 3}), TensorD::zeros({3, 3, 2})), DimensionError);
}

TEST(Conv2d, ScalarKernel) {
    auto y = conv2d(TensorF::full({1, 1, 3, 3}, 1.0f), tf({1, 1, 1, 1}, {2}), 1, 0);
    EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
    for (float v : y.data()) EXPECT_EQ(v, 2.0f);
}

TEST(Conv2d, DepthwiseIsPerChannelScaling) {
    Rng rng(4);
    auto x = oracle::random_tensor<float>(rng, {2, 3, 4, 4});
    auto w = tf({3, 1, 1, 1}, {0.5f, -2.0f, 3.0f});
    auto y = conv2d(x, w, 3, 0);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t p = 0; p < 16; ++p) {
                const std::size_t i = (n * 3 + c) * 16 + p;
                EXPECT_EQ(y.data()[i], x.data()[i] * w.data()[c]);
            }
}

TEST(Conv2d, GroupedMatchesSixLoopOracle) {
    Rng rng(1);
    const oracle::ConvShape s{2, 4, 5, 6, 4, 3, 2, 1};
    auto x = oracle::random_tensor<float>(rng, {2, 4, 5, 6});
    auto w = oracle::random_tensor<float>(rng, {4, 2, 3, 3});
    auto y = conv2d(x, w, 2, 1);
    EXPECT_EQ(y.shape(), (Shape{2, 4, 5, 6}));
    EXPECT_LT(oracle::max_abs_diff(oracle::values(y), oracle::conv2d(oracle::values(x), oracle::values(w), s)), 1e-5);
}

TEST(Conv2d, UnpaddedShrinksOutput) {
    Rng rng(2);
    const oracle::ConvShape s{1, 2, 6, 5, 3, 3, 1, 0};
    auto x = oracle::random_tensor<double>(rng, {1, 2, 6, 5});
    auto w = oracle::random_tensor<double>(rng, {3, 2, 3, 3});
    auto y = conv2d(x, w, 1, 0);
    EXPECT_EQ(y.shape(), (Shape{1, 3, 4, 3}));
    EXPECT_LT(oracle::max_abs_diff(oracle::values(y), oracle::conv2d(oracle::values(x), oracle::values(w), s)), 1e-12);
}

TEST(Conv2d, IndivisibleChannelsAreConfigErrors) {
    EXPECT_THROW(conv2d(TensorF::zeros({1, 3, 4, 4}), TensorF::zeros({4, 1, 3, 3}), 2, 1), ConfigError);
    EXPECT_THROW(conv2d(TensorF::zeros({1, 4, 4, 4}), TensorF::zeros({3, 2, 3, 3}), 2, 1), ConfigError);
    EXPECT_THROW(conv2d(TensorF::zeros({1, 4, 4, 4}), TensorF::zeros({4, 3, 3, 3}), 2, 1), DimensionError);
}

TEST(Softmax, AnalyticCases) {
    auto a = softmax(tf({1, 2}, {0, 0}));
    EXPECT_FLOAT_EQ(a.data()[0], 0.5f);
    auto b = softmax(TensorD::from({1, 2}, {std::log(2.0), 0.0}));
    EXPECT_NEAR(b.data()[0], 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(b.data()[1], 1.0 / 3.0, 1e-15);
    auto c = softmax(tf({1, 2}, {1000, 0}));
    EXPECT_EQ(c.data()[0], 1.0f);
    EXPECT_EQ(c.data()[1], 0.0f);
}

TEST(Softmax, NaNIsNumericError) {
    EXPECT_THROW(softmax(tf({1, 2}, {std::numeric_limits<float>::quiet_NaN(), 0})), NumericError);
}

TEST(Softmax, RowsSumToOneForLargeInputs) {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<float> v(5 * 7);
        for (auto& x : v) x = static_cast<float>(rng.uniform(-1e4, 1e4));
        auto p = softmax(tf({5, 7}, v));
        for (std::size_t r = 0; r < 5; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < 7; ++c) s += p.data()[r * 7 + c];
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Backward, SumGivesOnes) {
    auto x = TensorF::full({2, 3}, 4.0f, true);
    backward(sum(x));
    for (float g : x.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, HalfSquareGivesInput) {
    Rng rng(5);
    auto x = oracle::random_tensor<float>(rng, {3, 3}, true);
    backward(scale(sum(mul(x, x)), 0.5f));
    for (std::size_t i = 0; i < 9; ++i) EXPECT_FLOAT_EQ(x.grad()[i], x.data()[i]);
}

TEST(Backward, FanOutAccumulatesExactly) {
    Rng rng(6);
    auto x = oracle::random_tensor<float>(rng, {4}, true);
    auto w = oracle::random_tensor<float>(rng, {4});
    auto y = add(x, x);
    backward(sum(mul(y, w)));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(x.grad()[i], 2.0f * w.data()[i]);
}

TEST(Backward, NonScalarLossIsContractError) {
    auto x = TensorF::full({2}, 1.0f, true);
    EXPECT_THROW(backward(scale(x, 2.0f)), ContractError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
    auto x = TensorF::full({2}, 1.0f, true);
    TensorF y;
    {
        NoGradGuard guard;
        EXPECT_FALSE(grad_enabled());
        y = sum(x);
    }
    EXPECT_TRUE(grad_enabled());
    EXPECT_FALSE(y.requires_grad());
}

TEST(ComputeGraph, TopologicalAndVisitsEachNodeOnce) {
    auto x = TensorF::full({2, 2}, 0.5f, true);
    auto a = relu(x);
    auto b = mul(a, x);
    auto loss = sum(add(a, b));
    ComputeGraph<float> graph(loss);
    const auto& nodes = graph.nodes();
    std::set<const void*> seen;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        EXPECT_TRUE(seen.insert(nodes[i]).second);
        for (const auto& p : nodes[i]->parents) {
            const auto it = std::find(nodes.begin(), nodes.end(), p.get());
            ASSERT_NE(it, nodes.end());
            EXPECT_LT(static_cast<std::size_t>(it - nodes.begin()), i);
        }
    }
    graph.backward();
    // d/dx [relu(x) + relu(x)·x] = 1 + 2x for x > 0
    for (float g : x.grad()) EXPECT_FLOAT_EQ(g, 2.0f);
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalOutputs) {
    auto run = [] {
        Rng rng(9);
        auto x = oracle::random_tensor<float>(rng, {2, 3, 6, 6});
        auto w = oracle::random_tensor<float>(rng, {4, 3, 3, 3});
        return conv2d(relu(x), w, 1, 1).to_vector();
    };
    EXPECT_EQ(run(), run());
}

TEST(GradCheck, LinearFunctionIsExact) {
    auto x = TensorD::from({3}, {1.0, -2.0, 0.5}, true);
    auto w = TensorD::from({3}, {0.3, 0.7, -1.1});
    auto report = finite_difference_check<double>([&] { return sum(mul(x, w)); }, {x}, 1e-3);
    EXPECT_LT(report.worst_relative(), 1e-10);
}

TEST(GradCheck, QuadraticIn64Bit) {
    Rng rng(3);
    auto x = oracle::random_tensor<double>(rng, {8}, true);
    auto report = finite_difference_check<double>([&] { return sum(mul(mul(x, x), x)); }, {x}, 1e-3);
    EXPECT_LT(report.worst_relative(), 1e-4);
}

TEST(GradCheck, RejectsNondeterministicLoss) {
    auto x = TensorD::from({1}, {1.0}, true);
    double drift = 0.0;
    auto f = [&] {
        drift += 1.0;
        return sum(scale(x, drift));
    };
    EXPECT_THROW(finite_difference_check<double>(f, {x}, 1e-3), DeterminismError);
    EXPECT_THROW(finite_difference_check<double>([&] { return sum(x); }, {x}, 0.0), ConfigError);
}

TEST(GradCheck, RestoresParameters) {
    auto x = TensorD::from({2}, {0.25, -0.75}, true);
    finite_difference_check<double>([&] { return sum(mul(x, x)); }, {x}, 1e-2);
    EXPECT_EQ(x.to_vector(), (std::vector<double>{0.25, -0.75}));
}

// Every primitive against central differences, in both precisions.
template <typename T>
class PrimitiveGrad : public ::testing::Test {
protected:
    static double eps() { return std::is_same_v<T, float> ? 1e-3 : 1e-6; }
    static double tol() { return std::is_same_v<T, float> ? 1e-2 : 1e-5; }

    void check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params) {
        const auto report = finite_difference_check<T>(f, params, eps());
        EXPECT_LT(report.worst_relative(), tol());
    }

    // Entries bounded away from zero so relu and division have no kinks nearby.
    Tensor<T> away_from_zero(Rng& rng, const Shape& shape) {
        auto t = oracle::random_tensor<T>(rng, shape, true);
        for (auto& v : t.mutable_data()) v = v >= 0 ? v + T(0.2) : v - T(0.2);
        return t;
    }
};

using Precisions = ::testing::Types<float, double>;
TYPED_TEST_SUITE(PrimitiveGrad, Precisions);

TYPED_TEST(PrimitiveGrad, Matmul) {
    Rng rng(20);
    auto a = oracle::random_tensor<TypeParam>(rng, {3, 4}, true);
    auto b = oracle::random_tensor<TypeParam>(rng, {4, 2}, true);
    auto w = oracle::random_tensor<TypeParam>(rng, {3, 2});
    this->check([&] { return sum(mul(matmul(a, b), w)); }, {a, b});
}

TYPED_TEST(PrimitiveGrad, Bmm) {
    Rng rng(21);
    auto a = oracle::random_tensor<TypeParam>(rng, {2, 3, 2}, true);
    auto b = oracle::random_tensor<TypeParam>(rng, {2, 2, 3}, true);
    auto w = oracle::random_tensor<TypeParam>(rng, {2, 3, 3});
    this->check([&] { return sum(mul(bmm(a, b), w)); }, {a, b});
}

TYPED_TEST(PrimitiveGrad, LinearWithBias) {
    Rng rng(22);
    auto x = oracle::random_tensor<TypeParam>(rng, {3, 4}, true);
    auto w = oracle::random_tensor<TypeParam>(rng, {2, 4}, true);
    auto bias = oracle::random_tensor<TypeParam>(rng, {2}, true);
    auto g = oracle::random_tensor<TypeParam>(rng, {3, 2});
    this->check([&] { return sum(mul(linear(x, w, bias), g)); }, {x, w, bias});
}

TYPED_TEST(PrimitiveGrad, GroupedConv) {
    Rng rng(23);
    auto x = oracle::random_tensor<TypeParam>(rng, {2, 4, 3, 3}, true);
    auto w = oracle::random_tensor<TypeParam>(rng, {2, 2, 3, 3}, true);
    auto g = oracle::random_tensor<TypeParam>(rng, {2, 2, 3, 3});
    this->check([&] { return sum(mul(conv2d(x, w, 2, 1), g)); }, {x, w});
}

TYPED_TEST(PrimitiveGrad, ElementwiseAndRelu) {
    Rng rng(24);
    auto a = this->away_from_zero(rng, {2, 4});
    auto b = oracle::random_tensor<TypeParam>(rng, {2, 4}, true);
    auto g = oracle::random_tensor<TypeParam>(rng, {2, 4});
    this->check([&] { return sum(mul(add(relu(a), scale(sub(mul(a, b), b), TypeParam(0.5))), g)); }, {a, b});
}

TYPED_TEST(PrimitiveGrad, BroadcastAdds) {
    Rng rng(25);
    auto x = oracle::random_tensor<TypeParam>(rng, {2, 3, 2, 2}, true);
    auto cb = oracle::random_tensor<TypeParam>(rng, {3}, true);
    auto rb = oracle::random_tensor<TypeParam>(rng, {12}, true);
    auto g = oracle::random_tensor<TypeParam>(rng, {2, 12});
    this->check([&] { return sum(mul(add_rowwise(reshape(add_channel_bias(x, cb), {2, 12}), rb), g)); }, {x, cb, rb});
}

TYPED_TEST(PrimitiveGrad, ShapeOps) {
    Rng rng(26);
    auto a = oracle::random_tensor<TypeParam>(rng, {2, 3, 2}, true);
    auto b = oracle::random_tensor<TypeParam>(rng, {1, 3, 2}, true);
    auto g = oracle::random_tensor<TypeParam>(rng, {2, 3, 2});
    const std::vector<std::size_t> rows{2, 0};
    this->check(
        [&] {
            auto c = concat<TypeParam>({a, b}, 0);                  // 3×3×2
            auto p = permute(c, {2, 0, 1});                         // 2×3×3
            auto r = gather_rows(reshape(p, {3, 6}), rows);         // 2×6
            return sum(mul(reshape(transpose(reshape(r, {6, 2})), {2, 3, 2}), g));
        },
        {a, b});
}

TYPED_TEST(PrimitiveGrad, Pooling) {
    Rng rng(27);
    auto x = oracle::random_tensor<TypeParam>(rng, {1, 2, 4, 4}, true);
    auto g = oracle::random_tensor<TypeParam>(rng, {1, 2});
    this->check([&] { return sum(mul(global_avg_pool(avg_pool2d(x, 2)), g)); }, {x});
}

TYPED_TEST(PrimitiveGrad, SoftmaxFamily) {
    Rng rng(28);
    auto x = oracle::random_tensor<TypeParam>(rng, {3, 4}, true);
    auto g = oracle::random_tensor<TypeParam>(rng, {3, 4});
    this->check([&] { return sum(mul(softmax(x), g)); }, {x});
    this->check([&] { return sum(mul(log_softmax(x), g)); }, {x});
    this->check([&] { return sum(mul(l2_normalize_rows(x), g)); }, {x});
}

TYPED_TEST(PrimitiveGrad, Losses) {
    Rng rng(29);
    auto logits = oracle::random_tensor<TypeParam>(rng, {4, 3}, true);
    const std::vector<std::size_t> targets{0, 2, 1, 2};
    this->check([&] { return cross_entropy_with_logits(logits, targets); }, {logits});
    auto pred = oracle::random_tensor<TypeParam>(rng, {4, 2}, true);
    auto tgt = oracle::random_tensor<TypeParam>(rng, {4, 2});
    this->check([&] { return mse(pred, tgt); }, {pred});
    this->check([&] { return mean(mul(pred, pred)); }, {pred});
}

TEST(Losses, MatchLoopOracles) {
    Rng rng(30);
    auto logits = oracle::random_tensor<double>(rng, {4, 3});
    const std::vector<std::size_t> targets{0, 2, 1, 2};
    double ce = 0;
    for (std::size_t r = 0; r < 4; ++r) {
        double z = 0;
        for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits.at({r, c}));
        ce -= std::log(std::exp(logits.at({r, targets[r]})) / z);
    }
    EXPECT_NEAR(cross_entropy_with_logits(logits, targets).item(), ce / 4, 1e-12);

    auto p = oracle::random_tensor<double>(rng, {3, 2});
    auto t = oracle::random_tensor<double>(rng, {3, 2});
    double se = 0;
    for (std::size_t i = 0; i < 6; ++i) se += (p.data()[i] - t.data()[i]) * (p.data()[i] - t.data()[i]);
    EXPECT_NEAR(mse(p, t).item(), se / 6, 1e-12);
    EXPECT_EQ(mse(p, p).item(), 0.0);
    EXPECT_THROW(cross_entropy_with_logits(logits, std::vector<std::size_t>{0, 3, 1, 1}), DimensionError);
}

TEST(Pooling, MatchLoopOracle) {
    Rng rng(31);
    auto x = oracle::random_tensor<double>(rng, {1, 1, 4, 4});
    auto y = avg_pool2d(x, 2);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            double s = 0;
            for (std::size_t a = 0; a < 2; ++a)
                for (std::size_t b = 0; b < 2; ++b) s += x.at({0, 0, 2 * i + a, 2 * j + b});
            EXPECT_NEAR(y.at({0, 0, i, j}), s / 4, 1e-15);
        }
    const auto xv = oracle::values(x);
    EXPECT_NEAR(global_avg_pool(x).item(), std::accumulate(xv.begin(), xv.end(), 0.0) / 16, 1e-15);
    EXPECT_THROW(avg_pool2d(TensorD::zeros({1, 1, 3, 4}), 2), DimensionError);
}

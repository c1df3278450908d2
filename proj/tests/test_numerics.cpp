#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"

namespace seqshort {
namespace {

using testing::gradcheck;
using testing::random_tensor;
using testing::weighted_sum;

using V = Var<double>;

V leaf(Tensor<double> t) { return V::leaf(std::move(t), true); }

TEST(Tensor, RejectsMismatchedData) {
    EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), DimensionError);
    EXPECT_THROW(Tensor<float>(Shape{0, 3}), DimensionError);
}

TEST(Matmul, IdentityAndDotProduct) {
    const auto eye = V::constant(Tensor<double>::identity(2));
    const auto b = V::constant(Tensor<double>::matrix(2, 2, {1, 2, 3, 4}));
    EXPECT_EQ(matmul(eye, b).value(), b.value());

    const auto row = V::constant(Tensor<double>::matrix(1, 2, {1, 2}));
    const auto col = V::constant(Tensor<double>::matrix(2, 1, {3, 4}));
    EXPECT_DOUBLE_EQ(matmul(row, col).value()[0], 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    const auto a = V::constant(Tensor<double>::matrix(2, 3));
    const auto b = V::constant(Tensor<double>::matrix(2, 3));
    try {
        matmul(a, b);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
    std::mt19937_64 rng(1);
    const auto a = leaf(random_tensor<double>({3, 4}, rng));
    const auto b = leaf(random_tensor<double>({4, 2}, rng));
    const auto check = gradcheck([&] { return sum(matmul(a, b)); }, {a, b});
    EXPECT_LT(check.worst_relative_error, 1e-6);
}

TEST(Softmax, RowsAreStochasticAndStable) {
    const auto even = softmax_rows(V::constant(Tensor<double>::matrix(1, 2, {0, 0})));
    EXPECT_DOUBLE_EQ(even.value()[0], 0.5);
    EXPECT_DOUBLE_EQ(even.value()[1], 0.5);

    const auto big = softmax_rows(V::constant(Tensor<float>::matrix(1, 2, {1000.f, 0.f}).cast<double>()));
    EXPECT_TRUE(big.value().all_finite());
    EXPECT_NEAR(big.value()[0], 1.0, 1e-12);
    EXPECT_NEAR(big.value()[1], 0.0, 1e-12);

    std::mt19937_64 rng(2);
    const auto y = softmax_rows(Var<float>::constant(random_tensor<float>({5, 4000}, rng, 3.0)));
    for (std::size_t i = 0; i < 5; ++i) {
        double total = 0.0;
        for (const float v : y.value().row(i)) {
            EXPECT_GE(v, 0.f);
            total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-6);
    }
}

TEST(Softmax, JacobianVectorProductMatchesFiniteDifferences) {
    std::mt19937_64 rng(3);
    const auto x = leaf(random_tensor<double>({4, 7}, rng));
    const auto check = gradcheck([&] { return weighted_sum(softmax_rows(x), 11); }, {x});
    EXPECT_LT(check.worst_relative_error, 1e-6);
}

TEST(LayerNorm, HandComputedRow) {
    const auto x = V::constant(Tensor<double>::matrix(1, 2, {1, 3}));
    const auto gamma = V::constant(Tensor<double>({2}, 1.0));
    const auto beta = V::constant(Tensor<double>({2}, 0.0));
    const auto y = layer_norm(x, gamma, beta, 1e-12);
    EXPECT_NEAR(y.value()[0], -1.0, 1e-9);
    EXPECT_NEAR(y.value()[1], 1.0, 1e-9);
}

TEST(LayerNorm, ConstantRowMapsToBeta) {
    const auto x = V::constant(Tensor<double>::matrix(1, 4, 2.5));
    const auto y = layer_norm(x, V::constant(Tensor<double>({4}, 1.0)), V::constant(Tensor<double>({4}, 0.0)));
    for (const double v : y.value().values()) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(LayerNorm, NormalizedRowsHaveZeroMeanUnitVariance) {
    std::mt19937_64 rng(4);
    const auto x = V::constant(random_tensor<double>({6, 32}, rng, 5.0));
    const auto y = layer_norm(x, V::constant(Tensor<double>({32}, 1.0)), V::constant(Tensor<double>({32}, 0.0)));
    for (std::size_t i = 0; i < 6; ++i) {
        double mean = 0.0, var = 0.0;
        for (const double v : y.value().row(i)) mean += v;
        mean /= 32.0;
        for (const double v : y.value().row(i)) var += (v - mean) * (v - mean);
        var /= 32.0;
        EXPECT_LT(std::abs(mean), 1e-6);
        EXPECT_NEAR(var, 1.0, 1e-4);
    }
}

TEST(LayerNorm, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(5);
    const auto x = leaf(random_tensor<double>({3, 5}, rng));
    const auto gamma = leaf(random_tensor<double>({5}, rng));
    const auto beta = leaf(random_tensor<double>({5}, rng));
    const auto check = gradcheck([&] { return weighted_sum(layer_norm(x, gamma, beta), 12); }, {x, gamma, beta});
    EXPECT_LT(check.worst_relative_error, 1e-5);
}

TEST(CrossEntropy, KnownValues) {
    const auto uniform = cross_entropy(V::constant(Tensor<double>::matrix(1, 2, {0, 0})), 0);
    EXPECT_NEAR(uniform.value()[0], std::log(2.0), 1e-12);
    const auto confident = cross_entropy(V::constant(Tensor<double>::matrix(1, 2, {10, -10})), 0);
    EXPECT_NEAR(confident.value()[0], 0.0, 1e-8);
    EXPECT_THROW(cross_entropy(V::constant(Tensor<double>::matrix(1, 2, {0, 0})), 2), IndexError);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
    std::mt19937_64 rng(6);
    const auto logits = leaf(random_tensor<double>({1, 5}, rng));
    const auto check = gradcheck([&] { return cross_entropy(logits, 3); }, {logits});
    EXPECT_LT(check.worst_relative_error, 1e-6);
}

TEST(Structural, GeluAndConcat) {
    const auto g = gelu(V::constant(Tensor<double>::matrix(1, 1, 0.0)));
    EXPECT_EQ(g.value()[0], 0.0);

    const auto a = V::constant(Tensor<double>::matrix(3, 2, 1.0));
    const auto b = V::constant(Tensor<double>::matrix(1, 2, {7, 8}));
    const auto c = concat_rows(a, b);
    ASSERT_EQ(c.value().shape(), (Shape{4, 2}));
    EXPECT_EQ(c.value()(3, 0), 7.0);
    EXPECT_EQ(c.value()(3, 1), 8.0);
    EXPECT_THROW(concat_rows(a, V::constant(Tensor<double>::matrix(1, 3))), DimensionError);
    EXPECT_THROW(add(a, b), DimensionError);
}

TEST(Structural, EmbeddingLookupOutOfRange) {
    const auto table = V::constant(Tensor<double>::matrix(3, 2));
    EXPECT_THROW(embedding_lookup(table, {0, 3}), IndexError);
}

// Every differentiable op against central differences on 20 random inputs,
// step 1e-5 in float64.
TEST(GradientProperty, EveryOpOnTwentyRandomInputs) {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<std::size_t> dim(1, 6);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = dim(rng), n = dim(rng), p = dim(rng);
        const auto a = leaf(random_tensor<double>({m, n}, rng));
        const auto a2 = leaf(random_tensor<double>({m, n}, rng));
        const auto b = leaf(random_tensor<double>({n, p}, rng));
        const auto row = leaf(random_tensor<double>({n}, rng));
        const auto gamma = leaf(random_tensor<double>({n}, rng));
        const auto extra = leaf(random_tensor<double>({2, n}, rng));
        const auto label = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
        const std::uint64_t w = 100 + trial;
        const std::vector<std::pair<std::function<V()>, std::vector<V>>> cases = {
            {[&] { return weighted_sum(matmul(a, b), w); }, {a, b}},
            {[&] { return weighted_sum(transpose(a), w); }, {a}},
            {[&] { return weighted_sum(add(a, a2), w); }, {a, a2}},
            {[&] { return weighted_sum(mul(a, a2), w); }, {a, a2}},
            {[&] { return weighted_sum(add_row(a, row), w); }, {a, row}},
            {[&] { return weighted_sum(scale(a, 0.37), w); }, {a}},
            {[&] { return weighted_sum(softmax_rows(a), w); }, {a}},
            {[&] { return weighted_sum(gelu(a), w); }, {a}},
            {[&] { return weighted_sum(concat_rows(a, extra), w); }, {a, extra}},
            {[&] { return weighted_sum(concat_cols<double>({a, a2}), w); }, {a, a2}},
            {[&] { return weighted_sum(slice_cols(a, 0, n), w); }, {a}},
            {[&] { return weighted_sum(embedding_lookup(a, {m - 1, 0, m - 1}), w); }, {a}},
            {[&] { return cross_entropy(slice_rows(a, 0, 1), label); }, {a}},
        };
        for (const auto& [fn, leaves] : cases) worst = std::max(worst, gradcheck(fn, leaves).worst_relative_error);
        if (n >= 3) {  // width 2 normalizes to +-1, an O(eps) gradient below the step's resolution
            worst = std::max(worst, gradcheck([&] { return weighted_sum(layer_norm(a, gamma, row), w); }, {a, gamma, row})
                                        .worst_relative_error);
        }
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalOutputs) {
    std::mt19937_64 rng(8);
    const auto a = Var<float>::constant(random_tensor<float>({17, 33}, rng));
    const auto b = Var<float>::constant(random_tensor<float>({33, 9}, rng));
    const auto first = softmax_rows(matmul(a, b)).value();
    const auto second = softmax_rows(matmul(a, b)).value();
    EXPECT_EQ(first, second);
}

TEST(FlopCounter, CountsOnlyWhileScoped) {
    const auto a = Var<double>::constant(Tensor<double>::matrix(3, 4));
    const auto b = Var<double>::constant(Tensor<double>::matrix(4, 5));
    {
        ScopedFlopCounter counter;
        matmul(a, b);
        EXPECT_EQ(counter.flops(), 2u * 3 * 4 * 5);
    }
    EXPECT_FALSE(FlopCounter::active());
}

}  // namespace
}  // namespace seqshort

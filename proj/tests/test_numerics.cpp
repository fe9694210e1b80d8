#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cubeformer/numerics/ops.hpp"
#include "support.hpp"

using namespace cubeformer;
using testing_support::grad_check;
using testing_support::random_away_from_zero;
using testing_support::random_distinct;
using testing_support::random_tensor;

namespace {

using TD = Tensor<double>;
using Inputs = std::vector<TD>;
constexpr double kGradTol = 1e-4;

TD naive_conv(const TD& x, const TD& w, const TD& b, Index stride, Index pad) {
    const Index ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const Index co = w.dim(0), k = w.dim(2);
    const Index oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
    TD out({co, oh, ow});
    for (Index o = 0; o < co; ++o)
        for (Index i = 0; i < oh; ++i)
            for (Index j = 0; j < ow; ++j) {
                double acc = b.numel() ? b[o] : 0.0;
                for (Index c = 0; c < ci; ++c)
                    for (Index u = 0; u < k; ++u)
                        for (Index v = 0; v < k; ++v) {
                            const Index y = i * stride + u - pad, xx = j * stride + v - pad;
                            if (y < 0 || y >= h || xx < 0 || xx >= wd) continue;
                            acc += w[((o * ci + c) * k + u) * k + v] * x[(c * h + y) * wd + xx];
                        }
                out.mutable_values()[(o * oh + i) * ow + j] = acc;
            }
    return out;
}

}  // namespace

TEST(Autograd, SharedInputAccumulatesBothPaths) {
    TD x({3}, {1.0, 2.0, -3.0});
    x.set_requires_grad(true);
    backward(sum(mul(x, x) + x));  // d/dx = 2x + 1
    EXPECT_DOUBLE_EQ(x.grad()[0], 3.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 5.0);
    EXPECT_DOUBLE_EQ(x.grad()[2], -5.0);
}

TEST(Autograd, LeafGradientsAccumulateAcrossCalls) {
    TD x({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    backward(sum(x));
    backward(sum(x));
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    x.zero_grad();
    EXPECT_FALSE(x.has_grad());
}

TEST(Autograd, NonScalarLossIsUsageError) {
    TD x({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    EXPECT_THROW(backward(mul_scalar(x, 2.0)), UsageError);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
    TD x({2}, {1.0, 2.0});
    x.set_requires_grad(true);
    NoGradGuard g;
    const TD y = mul_scalar(x, 3.0);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.node()->parents.empty());
}

TEST(Ops, BroadcastAddMatchesLoop) {
    std::mt19937_64 rng(1);
    const TD a = random_tensor({2, 3, 4}, rng);
    const TD b = random_tensor({2, 1, 4}, rng);
    const TD c = a + b;
    for (Index i = 0; i < 2; ++i)
        for (Index j = 0; j < 3; ++j)
            for (Index k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(c[(i * 3 + j) * 4 + k], a[(i * 3 + j) * 4 + k] + b[i * 4 + k]);
    EXPECT_THROW(a + random_tensor({3, 4, 2}, rng), ShapeError);
}

TEST(Ops, MatmulMatchesLoop) {
    std::mt19937_64 rng(2);
    const TD a = random_tensor({3, 5}, rng), b = random_tensor({5, 2}, rng);
    const TD c = matmul(a, b);
    for (Index i = 0; i < 3; ++i)
        for (Index j = 0; j < 2; ++j) {
            double acc = 0;
            for (Index k = 0; k < 5; ++k) acc += a[i * 5 + k] * b[k * 2 + j];
            EXPECT_NEAR(c[i * 2 + j], acc, 1e-12);
        }
}

TEST(Ops, Conv2dMatchesDirectSummation) {
    std::mt19937_64 rng(3);
    for (Index k : {1, 3}) {
        for (Index stride : {1, 2}) {
            const TD x = random_tensor({3, 9, 7}, rng);
            const TD w = random_tensor({4, 3, k, k}, rng);
            const TD b = random_tensor({4}, rng);
            const Index pad = k / 2;
            const TD got = conv2d(x, w, b, stride, pad);
            const TD want = naive_conv(x, w, b, stride, pad);
            ASSERT_EQ(got.shape(), want.shape());
            EXPECT_LT((got.values() - want.values()).cwiseAbs().maxCoeff(), 1e-12);
        }
    }
}

TEST(Ops, DepthwiseConvEqualsBlockDiagonalConv) {
    std::mt19937_64 rng(4);
    const TD x = random_tensor({3, 6, 6}, rng);
    const TD w = random_tensor({3, 1, 3, 3}, rng);
    const TD b = random_tensor({3}, rng);
    TD full({3, 3, 3, 3});
    for (Index c = 0; c < 3; ++c)
        for (Index t = 0; t < 9; ++t) full.mutable_values()[(c * 3 + c) * 9 + t] = w[c * 9 + t];
    const TD got = depthwise_conv2d(x, w, b, 1, 1);
    EXPECT_LT((got.values() - naive_conv(x, full, b, 1, 1).values()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Ops, LayerNormNormalizesChannelAxis) {
    std::mt19937_64 rng(5);
    const TD x = random_tensor({5, 2, 3}, rng);
    const TD y = layer_norm(x, TD::ones({5}), TD::zeros({5}), 0.0);
    for (Index p = 0; p < 6; ++p) {
        double m = 0, v = 0;
        for (Index c = 0; c < 5; ++c) m += y[c * 6 + p];
        for (Index c = 0; c < 5; ++c) v += y[c * 6 + p] * y[c * 6 + p];
        EXPECT_NEAR(m / 5, 0.0, 1e-12);
        EXPECT_NEAR(v / 5, 1.0, 1e-12);
    }
}

TEST(Ops, SoftmaxRowsSumToOneAndResistOverflow) {
    TD x({2, 3}, {1000.0, 1001.0, 1002.0, -5.0, 0.0, 5.0});
    const TD s = softmax(x, 1);
    for (Index r = 0; r < 2; ++r) EXPECT_NEAR(s[r * 3] + s[r * 3 + 1] + s[r * 3 + 2], 1.0, 1e-12);
    const double e = std::exp(1.0);
    EXPECT_NEAR(s[2], e * e / (1 + e + e * e), 1e-12);
}

TEST(Ops, PixelShuffleLayoutAndInverse) {
    std::mt19937_64 rng(6);
    const TD x = random_tensor({8, 3, 2}, rng);
    const TD y = pixel_shuffle(x, 2);
    ASSERT_EQ(y.shape(), (Shape{2, 6, 4}));
    // element (c*4 + u*2 + v, i, j) lands at (c, 2i+u, 2j+v)
    EXPECT_DOUBLE_EQ(y[(1 * 6 + 2 * 2 + 1) * 4 + 2 * 1 + 0], x[((1 * 4 + 1 * 2 + 0) * 3 + 2) * 2 + 1]);
    const TD back = pixel_unshuffle(y, 2);
    EXPECT_EQ(back.values(), x.values());
}

TEST(Ops, ReflectPadMirrorsWithoutEdgeRepeat) {
    TD x({1, 1, 4}, {1.0, 2.0, 3.0, 4.0});
    const TD y = pad2d(x, 0, 0, 2, 2, PadMode::reflect);
    const std::vector<double> want{3, 2, 1, 2, 3, 4, 3, 2};
    for (Index i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(y[i], want[static_cast<std::size_t>(i)]);
}

TEST(Ops, AdaptiveAvgPoolGlobalMean) {
    std::mt19937_64 rng(7);
    const TD x = random_tensor({2, 5, 3}, rng);
    const TD y = adaptive_avg_pool2d(x, 1, 1);
    for (Index c = 0; c < 2; ++c) EXPECT_NEAR(y[c], x.values().segment(c * 15, 15).mean(), 1e-12);
}

TEST(Ops, BilinearUpsampleHalfPixelCentres) {
    TD x({1, 1, 2}, {0.0, 1.0});
    const TD y = upsample_bilinear(x, 1, 4);
    // sources -0.25 (clamped), 0.25, 0.75, 1.25
    const std::vector<double> want{0.0, 0.25, 0.75, 1.0};
    for (Index i = 0; i < 4; ++i) EXPECT_NEAR(y[i], want[static_cast<std::size_t>(i)], 1e-12);
}

TEST(Ops, MaxPoolPicksWindowMaximum) {
    TD x({1, 3, 3}, {1, 5, 2, 0, 3, 9, 4, 8, 7});
    const TD y = max_pool2d(x, 2, 1);
    ASSERT_EQ(y.shape(), (Shape{1, 2, 2}));
    EXPECT_DOUBLE_EQ(y[0], 5);
    EXPECT_DOUBLE_EQ(y[1], 9);
    EXPECT_DOUBLE_EQ(y[2], 8);
    EXPECT_DOUBLE_EQ(y[3], 9);
}

TEST(Ops, SplitConcatRoundTrip) {
    std::mt19937_64 rng(8);
    const TD x = random_tensor({5, 2, 3}, rng);
    const auto parts = split(x, 0, {2, 3});
    EXPECT_EQ(concat(parts, 0).values(), x.values());
    EXPECT_THROW(split(x, 0, {2, 2}), ShapeError);
}

// ---- gradient checks, one per primitive -----------------------------------

struct GradCase {
    const char* name;
    std::function<TD(const Inputs&)> f;
    std::function<Inputs(std::mt19937_64&)> make;
};

class PrimitiveGrad : public ::testing::TestWithParam<GradCase> {};

TEST_P(PrimitiveGrad, MatchesCentralDifferences) {
    std::mt19937_64 rng(11);
    const auto& c = GetParam();
    const auto r = grad_check(c.f, c.make(rng));
    EXPECT_GT(r.checked, 0u);
    EXPECT_LT(r.max_rel_error, kGradTol) << c.name;
}

const std::vector<GradCase>& primitive_cases() {
    static const std::vector<GradCase> cases = {
        {"add_broadcast", [](const Inputs& v) { return v[0] + v[1]; },
         [](auto& g) { return Inputs{random_tensor({2, 3, 4}, g), random_tensor({3, 1}, g)}; }},
        {"sub", [](const Inputs& v) { return v[0] - v[1]; },
         [](auto& g) { return Inputs{random_tensor({3, 4}, g), random_tensor({1, 4}, g)}; }},
        {"mul_broadcast", [](const Inputs& v) { return v[0] * v[1]; },
         [](auto& g) { return Inputs{random_tensor({2, 3, 4}, g), random_tensor({2, 1, 1}, g)}; }},
        {"add_scalar", [](const Inputs& v) { return add_scalar(v[0], 0.7); },
         [](auto& g) { return Inputs{random_tensor({5}, g)}; }},
        {"mul_scalar", [](const Inputs& v) { return mul_scalar(v[0], -1.3); },
         [](auto& g) { return Inputs{random_tensor({5}, g)}; }},
        {"neg", [](const Inputs& v) { return neg(v[0]); }, [](auto& g) { return Inputs{random_tensor({5}, g)}; }},
        {"matmul", [](const Inputs& v) { return matmul(v[0], v[1]); },
         [](auto& g) { return Inputs{random_tensor({3, 4}, g), random_tensor({4, 5}, g)}; }},
        {"gelu", [](const Inputs& v) { return gelu(v[0]); },
         [](auto& g) { return Inputs{random_tensor({20}, g, -3, 3)}; }},
        {"sigmoid", [](const Inputs& v) { return sigmoid(v[0]); },
         [](auto& g) { return Inputs{random_tensor({20}, g, -4, 4)}; }},
        {"relu", [](const Inputs& v) { return relu(v[0]); },
         [](auto& g) { return Inputs{random_away_from_zero({20}, g)}; }},
        {"abs", [](const Inputs& v) { return abs(v[0]); },
         [](auto& g) { return Inputs{random_away_from_zero({20}, g)}; }},
        {"reshape", [](const Inputs& v) { return reshape(v[0], {6, 2}); },
         [](auto& g) { return Inputs{random_tensor({3, 4}, g)}; }},
        {"permute", [](const Inputs& v) { return permute(v[0], {2, 0, 1}); },
         [](auto& g) { return Inputs{random_tensor({2, 3, 4}, g)}; }},
        {"slice", [](const Inputs& v) { return slice(v[0], 1, 1, 3); },
         [](auto& g) { return Inputs{random_tensor({2, 4, 3}, g)}; }},
        {"concat", [](const Inputs& v) { return concat(std::vector<TD>{v[0], v[1]}, 1); },
         [](auto& g) { return Inputs{random_tensor({2, 2, 3}, g), random_tensor({2, 1, 3}, g)}; }},
        {"split",
         [](const Inputs& v) {
             const auto p = split(v[0], 0, {1, 3});
             return p[0] + slice(p[1], 0, 2, 3);
         },
         [](auto& g) { return Inputs{random_tensor({4, 3}, g)}; }},
        {"gather",
         [](const Inputs& v) {
             static const std::vector<Index> idx{5, 0, 0, 3, 2, 5};
             return gather(v[0], std::span<const Index>(idx), {2, 3});
         },
         [](auto& g) { return Inputs{random_tensor({6}, g)}; }},
        {"pad_zero", [](const Inputs& v) { return pad2d(v[0], 1, 2, 0, 1, PadMode::zero); },
         [](auto& g) { return Inputs{random_tensor({2, 3, 3}, g)}; }},
        {"pad_reflect", [](const Inputs& v) { return pad2d(v[0], 2, 1, 2, 2, PadMode::reflect); },
         [](auto& g) { return Inputs{random_tensor({2, 4, 5}, g)}; }},
        {"sum", [](const Inputs& v) { return sum(v[0]); }, [](auto& g) { return Inputs{random_tensor({3, 4}, g)}; }},
        {"mean", [](const Inputs& v) { return mean(v[0]); }, [](auto& g) { return Inputs{random_tensor({3, 4}, g)}; }},
        {"sum_axis", [](const Inputs& v) { return sum(v[0], 1); },
         [](auto& g) { return Inputs{random_tensor({2, 3, 4}, g)}; }},
        {"mean_axis", [](const Inputs& v) { return mean(v[0], 2); },
         [](auto& g) { return Inputs{random_tensor({2, 3, 4}, g)}; }},
        {"adaptive_avg_pool", [](const Inputs& v) { return adaptive_avg_pool2d(v[0], 2, 3); },
         [](auto& g) { return Inputs{random_tensor({2, 5, 7}, g)}; }},
        {"max_pool", [](const Inputs& v) { return max_pool2d(v[0], 3, 2); },
         [](auto& g) { return Inputs{random_distinct({2, 7, 7}, g)}; }},
        {"upsample_nearest", [](const Inputs& v) { return upsample_nearest(v[0], 6, 4); },
         [](auto& g) { return Inputs{random_tensor({2, 3, 2}, g)}; }},
        {"upsample_bilinear", [](const Inputs& v) { return upsample_bilinear(v[0], 7, 9); },
         [](auto& g) { return Inputs{random_tensor({2, 3, 4}, g)}; }},
        {"conv2d_3x3", [](const Inputs& v) { return conv2d(v[0], v[1], v[2], 1, 1); },
         [](auto& g) {
             return Inputs{random_tensor({3, 6, 5}, g), random_tensor({4, 3, 3, 3}, g), random_tensor({4}, g)};
         }},
        {"conv2d_1x1", [](const Inputs& v) { return conv2d(v[0], v[1], v[2], 1, 0); },
         [](auto& g) {
             return Inputs{random_tensor({3, 4, 5}, g), random_tensor({2, 3, 1, 1}, g), random_tensor({2}, g)};
         }},
        {"conv2d_stride2", [](const Inputs& v) { return conv2d(v[0], v[1], v[2], 2, 0); },
         [](auto& g) {
             return Inputs{random_tensor({2, 7, 7}, g), random_tensor({3, 2, 3, 3}, g), random_tensor({3}, g)};
         }},
        {"depthwise_conv2d", [](const Inputs& v) { return depthwise_conv2d(v[0], v[1], v[2], 1, 1); },
         [](auto& g) {
             return Inputs{random_tensor({3, 5, 6}, g), random_tensor({3, 1, 3, 3}, g), random_tensor({3}, g)};
         }},
        {"layer_norm", [](const Inputs& v) { return layer_norm(v[0], v[1], v[2], 1e-6); },
         [](auto& g) { return Inputs{random_tensor({6, 2, 3}, g), random_tensor({6}, g), random_tensor({6}, g)}; }},
        {"softmax", [](const Inputs& v) { return softmax(v[0], 1); },
         [](auto& g) { return Inputs{random_tensor({3, 5}, g, -2, 2)}; }},
        {"softmax_axis0", [](const Inputs& v) { return softmax(v[0], 0); },
         [](auto& g) { return Inputs{random_tensor({4, 3}, g, -2, 2)}; }},
        {"pixel_shuffle", [](const Inputs& v) { return pixel_shuffle(v[0], 2); },
         [](auto& g) { return Inputs{random_tensor({8, 2, 3}, g)}; }},
        {"pixel_unshuffle", [](const Inputs& v) { return pixel_unshuffle(v[0], 2); },
         [](auto& g) { return Inputs{random_tensor({2, 4, 6}, g)}; }},
    };
    return cases;
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGrad, ::testing::ValuesIn(primitive_cases()),
                         [](const auto& info) { return std::string(info.param.name); });

TEST(Ops, FloatAndDoubleAgree) {
    std::mt19937_64 rng(9);
    const TD x = random_tensor({3, 8, 8}, rng);
    const TD w = random_tensor({4, 3, 3, 3}, rng);
    const TD b = random_tensor({4}, rng);
    const TD yd = gelu(conv2d(x, w, b, 1, 1));
    const Tensor<float> yf = gelu(conv2d(x.cast<float>(), w.cast<float>(), b.cast<float>(), 1, 1));
    EXPECT_LT((yd.values() - yf.values().cast<double>()).cwiseAbs().maxCoeff(), 1e-5);
}

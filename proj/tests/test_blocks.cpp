#include <gtest/gtest.h>

#include <random>

#include "cubeformer/blocks.hpp"
#include "cubeformer/numerics/ops.hpp"
#include "support.hpp"

using namespace cubeformer;
using testing_support::grad_check;
using testing_support::random_tensor;

namespace {

using TD = Tensor<double>;

BlockConfig small_config() {
    BlockConfig cfg;
    cfg.heads = 2;
    cfg.intra = {4, 4, 2, SamplingMode::block};
    cfg.inter = {4, 4, 2, SamplingMode::grid};
    return cfg;
}

template <typename P>
std::int64_t count(P& p) {
    std::int64_t n = 0;
    visit_params<double>(p, "p", [&](const std::string&, TD& t) { n += t.numel(); });
    return n;
}

template <typename P>
std::vector<TD> with_params(TD x, P& p) {
    std::vector<TD> v{std::move(x)};
    visit_params<double>(p, "p", [&](const std::string&, TD& t) { v.push_back(t); });
    testing_support::randomize_zero_tensors(v, 99);
    return v;
}

void zero(ConvParams<double>& c) {
    c.weight.mutable_values().setZero();
    c.bias.mutable_values().setZero();
}

std::int64_t conv_count(Index in, Index out, Index k) { return in * out * k * k + out; }

}  // namespace

TEST(ChannelShuffle, FollowsGroupTransposeRule) {
    TD x({6, 1, 1}, {0, 1, 2, 3, 4, 5});
    const TD y = channel_shuffle(x, 2);
    // output i = input (i mod 2) * 3 + i div 2
    const std::vector<double> want{0, 3, 1, 4, 2, 5};
    for (Index i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(y[i], want[static_cast<std::size_t>(i)]);
    const TD back = channel_shuffle(y, 3);
    EXPECT_EQ(back.values(), x.values());
    EXPECT_THROW(channel_shuffle(x, 4), ConfigurationError);
}

TEST(ChannelSplit, HalvesAndRejectsOdd) {
    std::mt19937_64 rng(1);
    const TD x = random_tensor({4, 2, 2}, rng);
    const auto [a, b] = channel_split(x);
    EXPECT_EQ(a.values(), x.values().head(8));
    EXPECT_EQ(b.values(), x.values().tail(8));
    EXPECT_THROW(channel_split(random_tensor({3, 2, 2}, rng)), ConfigurationError);
}

TEST(ChannelSplit, AfterShuffleInterleavesEvenAndOdd) {
    TD x({4, 1, 1}, {0, 1, 2, 3});
    const auto [a, b] = channel_split(channel_shuffle(x, 2));
    EXPECT_EQ(a.values(), (VectorX<double>(2) << 0, 2).finished());
    EXPECT_EQ(b.values(), (VectorX<double>(2) << 1, 3).finished());
    const TD back = concat<double>({a, b}, 0);
    EXPECT_EQ(back.values(), channel_shuffle(x, 2).values());
}

TEST(Mbconv, ZeroProjectionIsIdentity) {
    std::mt19937_64 rng(2);
    ParamInit init(3);
    auto p = make_mbconv_params<double>(init, 8, small_config());
    zero(p.project);
    const TD x = random_tensor({8, 6, 6}, rng);
    EXPECT_EQ(mbconv_forward(x, p).values(), x.values());
}

TEST(Mbconv, SqueezeGateIsPerChannelInUnitInterval) {
    std::mt19937_64 rng(4);
    ParamInit init(5);
    const auto p = make_mbconv_params<double>(init, 8, small_config());
    const TD hidden = random_tensor({16, 5, 5}, rng);
    const TD g = squeeze_excitation(hidden, p.se_reduce, p.se_expand);
    ASSERT_EQ(g.shape(), (Shape{16, 1, 1}));
    EXPECT_GT(g.values().minCoeff(), 0.0);
    EXPECT_LT(g.values().maxCoeff(), 1.0);
}

TEST(Mbconv, SqueezeGateOfConstantInputIsSpatiallyUniform) {
    ParamInit init(52);
    const auto p = make_mbconv_params<double>(init, 8, small_config());
    const TD ones = Tensor<double>::ones({16, 6, 6});
    const TD gated = mul(ones, squeeze_excitation(ones, p.se_reduce, p.se_expand));
    for (Index c = 0; c < 16; ++c) {
        const auto plane = gated.values().segment(c * 36, 36);
        EXPECT_EQ(plane.maxCoeff(), plane.minCoeff());
    }
}

TEST(Mbconv, ParameterCountMatchesLayerSum) {
    ParamInit init(6);
    BlockConfig cfg;
    auto p = make_mbconv_params<double>(init, 64, cfg);
    // expand 1x1 to 128, depthwise 3x3, SE 128->16->128, project to 64
    const std::int64_t want = conv_count(64, 128, 1) + (128 * 9 + 128) + conv_count(128, 16, 1) +
                              conv_count(16, 128, 1) + conv_count(128, 64, 1);
    EXPECT_EQ(count(p), want);
}

TEST(Esa, ZeroRestoreGatesAtOneHalf) {
    std::mt19937_64 rng(7);
    ParamInit init(8);
    auto p = make_esa_params<double>(init, 8);
    zero(p.restore);
    const TD x = random_tensor({8, 16, 16}, rng);
    const TD y = esa_forward(x, p);
    EXPECT_LT((y.values() - 0.5 * x.values()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Esa, SaturatedGatesPassOrBlock) {
    std::mt19937_64 rng(50);
    ParamInit init(51);
    auto p = make_esa_params<double>(init, 8);
    p.restore.weight.mutable_values().setZero();
    const TD x = random_tensor({8, 16, 16}, rng);
    p.restore.bias.mutable_values().setConstant(100.0);
    EXPECT_EQ(esa_forward(x, p).values(), x.values());
    p.restore.bias.mutable_values().setConstant(-800.0);
    EXPECT_EQ(esa_forward(x, p).values().cwiseAbs().maxCoeff(), 0.0);
}

TEST(Esa, RejectsTinyInputs) {
    std::mt19937_64 rng(9);
    ParamInit init(10);
    const auto p = make_esa_params<double>(init, 8);
    EXPECT_THROW(esa_forward(random_tensor({8, 14, 16}, rng), p), ConfigurationError);
    EXPECT_NO_THROW(esa_forward(random_tensor({8, kEsaMinExtent, kEsaMinExtent}, rng), p));
}

TEST(Esa, ParameterCountAtWidth64) {
    ParamInit init(11);
    auto p = make_esa_params<double>(init, 64);
    const std::int64_t want = conv_count(64, 16, 1) + conv_count(16, 16, 1) + 4 * conv_count(16, 16, 3) +
                              conv_count(16, 64, 1);
    EXPECT_EQ(count(p), want);
    EXPECT_EQ(want, 11680);
}

TEST(Ctb, ZeroedProjectionsGiveIdentity) {
    std::mt19937_64 rng(12);
    ParamInit init(13);
    const auto cfg = small_config();
    auto p = make_ctb_params<double>(init, 8, cfg);
    zero(p.attn.proj);
    zero(p.ffn.project);
    const TD x = random_tensor({8, 8, 8}, rng);
    EXPECT_EQ(ctb_forward(x, p, AttentionKind::intra, cfg).values(), x.values());
    EXPECT_EQ(ctb_forward(x, p, AttentionKind::inter, cfg).values(), x.values());
}

TEST(Ctb, WidthMismatchIsConfigurationError) {
    std::mt19937_64 rng(14);
    ParamInit init(15);
    const auto cfg = small_config();
    const auto p = make_ctb_params<double>(init, 8, cfg);
    EXPECT_THROW(ctb_forward(random_tensor({4, 8, 8}, rng), p, AttentionKind::intra, cfg), ConfigurationError);
}

TEST(Ctb, ParameterCount) {
    ParamInit init(16);
    BlockConfig cfg;
    auto p = make_ctb_params<double>(init, 64, cfg);
    const std::int64_t ln = 2 * 64;
    const std::int64_t attn = 4 * conv_count(64, 64, 1);
    const std::int64_t ffn = conv_count(64, 192, 1) + (192 * 9 + 192) + conv_count(192, 64, 1);
    EXPECT_EQ(count(p), 2 * ln + attn + ffn);
}

TEST(CtgLite, SecondHalfBypassesAttention) {
    std::mt19937_64 rng(17);
    ParamInit init(18);
    const auto cfg = small_config();
    auto p = make_ctg_params<double>(init, 8, cfg, true);
    const TD x = random_tensor({8, 8, 8}, rng);
    const TD feats = ctg_lite_features(x, p, cfg);
    const TD shuffled = channel_shuffle(mbconv_forward(x, p.mbconv), cfg.shuffle_groups);
    EXPECT_EQ(feats.values().tail(4 * 64), shuffled.values().tail(4 * 64));
    EXPECT_NE(feats.values().head(4 * 64), shuffled.values().head(4 * 64));
}

TEST(CtgLite, AttentionRunsOnHalfWidth) {
    ParamInit init(19);
    const auto cfg = small_config();
    auto full = make_ctg_params<double>(init, 8, cfg, false);
    auto lite = make_ctg_params<double>(init, 8, cfg, true);
    EXPECT_EQ(full.intra.attn.q.weight.dim(0), 8);
    EXPECT_EQ(lite.intra.attn.q.weight.dim(0), 4);
    EXPECT_LT(count(lite), count(full));
}

TEST(Ctg, OutputShapeAndDispatch) {
    std::mt19937_64 rng(20);
    ParamInit init(21);
    const auto cfg = small_config();
    const auto full = make_ctg_params<double>(init, 8, cfg, false);
    const auto lite = make_ctg_params<double>(init, 8, cfg, true);
    const TD x = random_tensor({8, 16, 16}, rng);
    EXPECT_EQ(group_forward(x, full, cfg).values(), ctg_forward(x, full, cfg).values());
    EXPECT_EQ(group_forward(x, lite, cfg).values(), ctg_lite_forward(x, lite, cfg).values());
    EXPECT_EQ(ctg_forward(x, full, cfg).shape(), x.shape());
    EXPECT_EQ(ctg_forward(x, full, cfg).values(), ctg_forward(x, full, cfg).values());
}

// ---- gradient checks -----------------------------------------------------

TEST(BlockGrad, Ffn) {
    std::mt19937_64 rng(30);
    ParamInit init(31);
    auto p = make_ffn_params<double>(init, 4, small_config());
    const auto r = grad_check([&](const std::vector<TD>& v) { return ffn_forward(v[0], p); },
                              with_params(random_tensor({4, 5, 5}, rng), p));
    EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(BlockGrad, CtbIntraAndInter) {
    std::mt19937_64 rng(32);
    ParamInit init(33);
    const auto cfg = small_config();
    auto p = make_ctb_params<double>(init, 8, cfg);
    for (auto kind : {AttentionKind::intra, AttentionKind::inter}) {
        const auto r = grad_check([&](const std::vector<TD>& v) { return ctb_forward(v[0], p, kind, cfg); },
                                  with_params(random_tensor({8, 8, 8}, rng), p), 34, 12);
        EXPECT_LT(r.max_rel_error, 1e-4);
    }
}

TEST(BlockGrad, Mbconv) {
    std::mt19937_64 rng(35);
    ParamInit init(36);
    auto p = make_mbconv_params<double>(init, 8, small_config());
    const auto r = grad_check([&](const std::vector<TD>& v) { return mbconv_forward(v[0], p); },
                              with_params(random_tensor({8, 6, 6}, rng), p));
    EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(BlockGrad, Esa) {
    std::mt19937_64 rng(37);
    ParamInit init(38);
    auto p = make_esa_params<double>(init, 8);
    const auto r = grad_check([&](const std::vector<TD>& v) { return esa_forward(v[0], p); },
                              with_params(random_tensor({8, 16, 16}, rng), p));
    EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(BlockGrad, ChannelShuffleAndSplit) {
    std::mt19937_64 rng(39);
    const auto r = grad_check(
        [](const std::vector<TD>& v) {
            const auto [a, b] = channel_split(channel_shuffle(v[0], 2));
            return mul(a, b);
        },
        {random_tensor({6, 3, 3}, rng)});
    EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(BlockGrad, Ctg) {
    std::mt19937_64 rng(40);
    ParamInit init(41);
    const auto cfg = small_config();
    auto p = make_ctg_params<double>(init, 8, cfg, false);
    const auto r = grad_check([&](const std::vector<TD>& v) { return ctg_forward(v[0], p, cfg); },
                              with_params(random_tensor({8, 16, 16}, rng), p), 42, 8);
    EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(BlockGrad, CtgLite) {
    std::mt19937_64 rng(43);
    ParamInit init(44);
    const auto cfg = small_config();
    auto p = make_ctg_params<double>(init, 8, cfg, true);
    const auto r = grad_check([&](const std::vector<TD>& v) { return ctg_lite_forward(v[0], p, cfg); },
                              with_params(random_tensor({8, 16, 16}, rng), p), 45, 8);
    EXPECT_LT(r.max_rel_error, 1e-4);
}

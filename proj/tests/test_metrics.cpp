#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cubeformer/data/resize.hpp"
#include "cubeformer/errors.hpp"
#include "cubeformer/metrics.hpp"
#include "support.hpp"

using namespace cubeformer;
using testing_support::synthetic_image;

namespace {

PlaneD random_plane(Index h, Index w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    PlaneD p(h, w);
    for (Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
    return p;
}

// Per-window SSIM with an explicit 2-D Gaussian window and nested loops.
double ssim_oracle(const PlaneD& a, const PlaneD& b) {
    double g[11][11];
    double gsum = 0.0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
            const double di = i - 5, dj = j - 5;
            g[i][j] = std::exp(-(di * di + dj * dj) / (2 * 1.5 * 1.5));
            gsum += g[i][j];
        }
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double total = 0.0;
    int count = 0;
    for (Index y = 0; y + 11 <= a.rows(); ++y)
        for (Index x = 0; x + 11 <= a.cols(); ++x) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (int i = 0; i < 11; ++i)
                for (int j = 0; j < 11; ++j) {
                    const double w = g[i][j] / gsum;
                    const double va = a(y + i, x + j), vb = b(y + i, x + j);
                    ma += w * va;
                    mb += w * vb;
                    saa += w * va * va;
                    sbb += w * vb * vb;
                    sab += w * va * vb;
                }
            const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++count;
        }
    return total / count;
}

}  // namespace

TEST(Psnr, IdenticalIsCapped) {
    const auto p = random_plane(8, 8, 1);
    EXPECT_EQ(psnr(p, p), kPsnrCap);
}

TEST(Psnr, UniformErrorClosedForm) {
    const PlaneD a = PlaneD::Constant(10, 10, 0.5);
    const PlaneD b = a + 1.0 / 255.0;
    EXPECT_NEAR(psnr(a, b), 20.0 * std::log10(255.0), 1e-9);
    EXPECT_NEAR(psnr(a, b), 48.1308, 1e-4);
    const PlaneD half = a + 0.5 / 255.0;
    EXPECT_NEAR(psnr(a, half) - psnr(a, b), 6.0206, 1e-4);
}

TEST(Psnr, ShapeMismatchThrows) { EXPECT_THROW(psnr(PlaneD::Zero(4, 4), PlaneD::Zero(4, 5)), ShapeError); }

TEST(Psnr, DecreasesWithNoiseAmplitude) {
    const auto clean = random_plane(32, 32, 2);
    const auto noise = random_plane(32, 32, 3) - 0.5;
    double prev = kPsnrCap + 1;
    for (double amp : {0.01, 0.05, 0.2}) {
        const double v = psnr(clean, clean + amp * noise);
        EXPECT_LT(v, prev);
        prev = v;
    }
}

TEST(Ssim, WindowIsNormalizedGaussian) {
    const auto w = ssim_window_1d();
    ASSERT_EQ(w.size(), 11u);
    double s = 0.0;
    for (double v : w) s += v;
    EXPECT_NEAR(s, 1.0, 1e-15);
    EXPECT_NEAR(w[5] / w[6], std::exp(1.0 / (2 * 1.5 * 1.5)), 1e-12);
}

TEST(Ssim, MatchesDoubleLoopOracle) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto a = random_plane(17 + seed, 23, 10 + seed);
        const PlaneD b = 0.7 * a + 0.3 * random_plane(17 + seed, 23, 20 + seed);
        EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b), 1e-6);
    }
}

TEST(Ssim, SelfIsExactlyOne) {
    const auto a = random_plane(20, 20, 4);
    EXPECT_EQ(ssim(a, a), 1.0);
}

TEST(Ssim, AntiCorrelatedCheckerboardIsNegative) {
    PlaneD c(16, 16);
    for (Index y = 0; y < 16; ++y)
        for (Index x = 0; x < 16; ++x) c(y, x) = (x + y) % 2;
    EXPECT_LT(ssim(c, 1.0 - c), 0.0);
}

TEST(Ssim, Symmetric) {
    const auto a = random_plane(15, 19, 5), b = random_plane(15, 19, 6);
    EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-9);
}

TEST(Ssim, MeanShiftDriftIsSmall) {
    const PlaneD a = 0.3 + 0.4 * random_plane(24, 24, 7);
    const PlaneD b = 0.3 + 0.4 * random_plane(24, 24, 8);
    EXPECT_LT(std::abs(ssim(a, b) - ssim(a + 0.1, b + 0.1)), 1e-3);
}

TEST(Ssim, TooSmallThrows) { EXPECT_THROW(ssim(PlaneD::Zero(10, 20), PlaneD::Zero(10, 20)), SizeError); }

TEST(Evaluate, IdenticalImages) {
    const auto img = synthetic_image(32, 32, 1);
    const auto s = evaluate(img, img, 2);
    EXPECT_EQ(s.psnr, kPsnrCap);
    EXPECT_EQ(s.ssim, 1.0);
}

TEST(Evaluate, BorderCorruptionIsIgnored) {
    const auto gt = synthetic_image(40, 40, 2);
    auto out = gt;
    for (auto& c : out.channels) {
        c.row(0).setConstant(1.0f);
        c.col(39).setConstant(0.0f);
    }
    const auto s = evaluate(out, gt, 2);
    EXPECT_EQ(s.psnr, kPsnrCap);
    EXPECT_EQ(s.ssim, 1.0);
    EXPECT_LT(evaluate(out, gt, 0).psnr, kPsnrCap);
}

TEST(Evaluate, BicubicBaselineIsWithinBounds) {
    const auto hr = synthetic_image(64, 64, 3);
    const auto up = bicubic_resize(bicubic_resize(hr, 32, 32), 64, 64);
    const auto s = evaluate(up, hr, 2);
    EXPECT_GT(s.psnr, 0.0);
    EXPECT_LT(s.psnr, kPsnrCap);
    EXPECT_LT(s.ssim, 1.0);
}

TEST(Evaluate, MisalignedThrows) {
    EXPECT_THROW(evaluate(ImageBuffer(30, 30), ImageBuffer(30, 32), 2), ShapeError);
    EXPECT_THROW(evaluate(ImageBuffer(14, 14), ImageBuffer(14, 14), 2), SizeError);
}

TEST(Report, MeansAreArithmetic) {
    EvalReport r;
    r.add("a", {30.0, 0.8});
    r.add("b", {34.0, 0.9});
    r.add("c", {29.0, 0.7});
    EXPECT_DOUBLE_EQ(r.mean_psnr(), 31.0);
    EXPECT_NEAR(r.mean_ssim(), 0.8, 1e-15);
    const auto jl = r.to_jsonl();
    EXPECT_EQ(std::count(jl.begin(), jl.end(), '\n'), 4);
    EXPECT_NE(r.to_table().find("mean"), std::string::npos);
}

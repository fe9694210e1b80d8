#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "cubeformer/data/image.hpp"
#include "cubeformer/numerics/ops.hpp"

namespace testing_support {

using cubeformer::Index;
using cubeformer::Shape;
using cubeformer::Tensor;
using cubeformer::VectorX;

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    VectorX<T> v(cubeformer::shape_numel(shape));
    for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<T>(u(rng));
    return Tensor<T>(shape, std::move(v));
}

/// Values bounded away from zero (for relu / abs kinks).
inline Tensor<double> random_away_from_zero(const Shape& shape, std::mt19937_64& rng, double gap = 0.1) {
    std::uniform_real_distribution<double> u(gap, 1.0);
    std::bernoulli_distribution sign(0.5);
    VectorX<double> v(cubeformer::shape_numel(shape));
    for (Index i = 0; i < v.size(); ++i) v[i] = sign(rng) ? u(rng) : -u(rng);
    return Tensor<double>(shape, std::move(v));
}

/// Distinct values spaced 1e-2 apart in random order (for max pooling ties).
inline Tensor<double> random_distinct(const Shape& shape, std::mt19937_64& rng) {
    const Index n = cubeformer::shape_numel(shape);
    std::vector<Index> order(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::shuffle(order.begin(), order.end(), rng);
    VectorX<double> v(n);
    for (Index i = 0; i < n; ++i) v[i] = 0.01 * static_cast<double>(order[static_cast<std::size_t>(i)]) - 0.005 * n;
    return Tensor<double>(shape, std::move(v));
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

/// Central-difference check of d(sum(f(x) * R))/dx for every input tensor,
/// R a fixed random projection. Up to `samples` coordinates per input are
/// probed. The relative error per input is ||a - n|| / max(||a||, ||n||).
inline constexpr double kZeroGradFloor = 1e-8;

inline GradCheckResult grad_check(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                                  std::vector<Tensor<double>> inputs, std::uint64_t seed = 7, std::size_t samples = 24,
                                  double step = 1e-5) {
    std::mt19937_64 rng(seed);
    for (auto& x : inputs) x.set_requires_grad(true);
    const Tensor<double> probe_out = [&] {
        cubeformer::NoGradGuard g;
        return f(inputs);
    }();
    const Tensor<double> proj = random_tensor<double>(probe_out.shape(), rng);
    const auto objective = [&](const std::vector<Tensor<double>>& in) {
        return cubeformer::sum(cubeformer::mul(f(in), proj));
    };
    for (auto& x : inputs) x.zero_grad();
    cubeformer::backward(objective(inputs));

    GradCheckResult res;
    for (auto& x : inputs) {
        const VectorX<double> analytic = x.has_grad() ? x.grad() : VectorX<double>::Zero(x.numel());
        std::vector<Index> coords(static_cast<std::size_t>(x.numel()));
        for (Index i = 0; i < x.numel(); ++i) coords[static_cast<std::size_t>(i)] = i;
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(std::min(coords.size(), samples));
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        for (Index c : coords) {
            auto& data = x.mutable_values();
            const double orig = data[c];
            double fp, fm;
            {
                cubeformer::NoGradGuard g;
                data[c] = orig + step;
                fp = objective(inputs).item();
                data[c] = orig - step;
                fm = objective(inputs).item();
                data[c] = orig;
            }
            const double numeric = (fp - fm) / (2.0 * step);
            diff2 += (numeric - analytic[c]) * (numeric - analytic[c]);
            a2 += analytic[c] * analytic[c];
            n2 += numeric * numeric;
            ++res.checked;
        }
        // Both sides below finite-difference noise: a structurally zero gradient
        // (softmax-invariant bias, inactive ReLU) agrees trivially.
        const double scale = std::max(std::sqrt(a2), std::sqrt(n2));
        if (scale < kZeroGradFloor) continue;
        res.max_rel_error = std::max(res.max_rel_error, std::sqrt(diff2) / scale);
    }
    return res;
}

/// Fills every all-zero tensor (fresh biases, LN shifts) with uniform noise in
/// [-0.1, 0.1] so ReLU inputs do not sit exactly on the kink during a check.
inline void randomize_zero_tensors(std::vector<Tensor<double>>& tensors, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.1, 0.1);
    for (auto& t : tensors) {
        auto& v = t.mutable_values();
        if (v.size() == 0 || !(v.array() == 0.0).all()) continue;
        for (Index i = 0; i < v.size(); ++i) v[i] = u(rng);
    }
}

/// Unique scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::uint64_t counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("cubeformer_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

/// Deterministic synthetic RGB test picture: smooth shading, oriented
/// stripes of a few pixels period, hard-edged discs and rectangles.
inline cubeformer::ImageBuffer synthetic_image(Index h, Index w, std::uint64_t seed = 1) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    cubeformer::ImageBuffer img(h, w);
    struct Shape2 {
        bool disc;
        double cy, cx, ry, rx;
        double col[3];
    };
    std::vector<Shape2> shapes;
    for (int i = 0; i < 14; ++i) {
        const double r = (0.04 + 0.12 * u(rng)) * static_cast<double>(std::min(h, w));
        shapes.push_back({i % 2 == 0, u(rng) * h, u(rng) * w, r, r * (0.5 + u(rng)), {u(rng), u(rng), u(rng)}});
    }
    const double f1 = 0.6 + 0.5 * u(rng), f2 = 0.4 + 0.6 * u(rng), th = 3.14 * u(rng), ph = 6.28 * u(rng);
    const double cs = std::cos(th), sn = std::sin(th);
    for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
            const double yy = static_cast<double>(y), xx = static_cast<double>(x);
            const double along = cs * xx + sn * yy, across = -sn * xx + cs * yy;
            const double stripes = 0.18 * std::sin(f1 * along + ph) * (0.5 + 0.5 * std::cos(0.05 * across));
            double rgb[3] = {0.35 + 0.3 * xx / w + stripes, 0.45 + 0.2 * std::cos(f2 * across * 0.3) - 0.5 * stripes,
                             0.4 + 0.25 * yy / h + 0.1 * std::sin(f2 * (xx - yy))};
            for (const auto& s : shapes) {
                const double dy = (yy - s.cy) / s.ry, dx = (xx - s.cx) / s.rx;
                const bool inside = s.disc ? dy * dy + dx * dx < 1.0 : std::abs(dy) < 1.0 && std::abs(dx) < 1.0;
                if (inside) {
                    for (int c = 0; c < 3; ++c) rgb[c] = 0.35 * rgb[c] + 0.65 * s.col[c];
                }
            }
            for (int c = 0; c < 3; ++c) {
                img.channels[c](y, x) = static_cast<float>(cubeformer::quantize_u8(static_cast<float>(rgb[c])) / 255.0);
            }
        }
    }
    return img;
}

/// EMA of a loss trace is non-increasing after `burn_in` up to a relative slack:
/// no single step rises by more than `slack`, and the last value is below the
/// value at burn-in.
inline bool smoothed_non_increasing(const std::vector<double>& ema, std::size_t burn_in, double slack) {
    if (ema.size() <= burn_in + 1) return true;
    for (std::size_t i = burn_in + 1; i < ema.size(); ++i) {
        if (ema[i] > ema[i - 1] * (1.0 + slack)) return false;
    }
    return ema.back() < ema[burn_in];
}

/// Largest relative excess of the EMA over its running minimum since `burn_in`.
inline double excess_over_running_min(const std::vector<double>& ema, std::size_t burn_in) {
    if (ema.size() <= burn_in) return 0.0;
    double best = ema[burn_in], worst = 0.0;
    for (std::size_t i = burn_in + 1; i < ema.size(); ++i) {
        worst = std::max(worst, ema[i] / best - 1.0);
        best = std::min(best, ema[i]);
    }
    return worst;
}

}  // namespace testing_support

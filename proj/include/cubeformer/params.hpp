#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>

#include "cubeformer/numerics/ops.hpp"

namespace cubeformer {

template <typename T>
struct ConvParams {
    Tensor<T> weight;  // (C_out, C_in, k, k) or (C, 1, k, k) when depthwise
    Tensor<T> bias;    // (C_out)
    bool depthwise = false;

    Index kernel() const { return weight.dim(2); }
    Index out_channels() const { return weight.dim(0); }

    /// "Same" padding for odd kernels at stride 1.
    Tensor<T> operator()(const Tensor<T>& x, Index stride = 1, Index pad = -1) const {
        if (pad < 0) pad = kernel() / 2;
        return depthwise ? depthwise_conv2d(x, weight, bias, stride, pad) : conv2d(x, weight, bias, stride, pad);
    }
};

template <typename T>
struct LayerNormParams {
    Tensor<T> gamma;
    Tensor<T> beta;
    double eps = 1e-6;

    Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }
};

template <typename T>
using ParamVisitor = std::function<void(const std::string& path, Tensor<T>& tensor)>;

template <typename T>
void visit_params(ConvParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".weight", p.weight);
    fn(prefix + ".bias", p.bias);
}

template <typename T>
void visit_params(LayerNormParams<T>& p, const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".gamma", p.gamma);
    fn(prefix + ".beta", p.beta);
}

/// Init gain of the last convolution of every residual branch and of the
/// restoration head: the network starts close to its skip paths.
inline constexpr double kResidualOutputGain = 0.1;

/// Seeded parameter factory. Every draw comes from one engine in construction
/// order, so identical configs and seeds give bit-identical parameters.
class ParamInit {
public:
    explicit ParamInit(std::uint64_t seed, double gain = 1.0) : engine_(seed), gain_(gain) {}

    /// Standard deviation applied to weights with the given fan-in.
    double weight_std(Index fan_in) const { return gain_ / std::sqrt(static_cast<double>(fan_in)); }

    template <typename T>
    ConvParams<T> conv(Index in_channels, Index out_channels, Index kernel, double gain_scale = 1.0) {
        ConvParams<T> p;
        p.weight = truncated_normal<T>({out_channels, in_channels, kernel, kernel},
                                       gain_scale * weight_std(in_channels * kernel * kernel));
        p.bias = Tensor<T>::zeros({out_channels});
        return p;
    }

    template <typename T>
    ConvParams<T> depthwise(Index channels, Index kernel) {
        ConvParams<T> p;
        p.weight = truncated_normal<T>({channels, 1, kernel, kernel}, weight_std(kernel * kernel));
        p.bias = Tensor<T>::zeros({channels});
        p.depthwise = true;
        return p;
    }

    template <typename T>
    LayerNormParams<T> layer_norm(Index channels, double eps = 1e-6) {
        return {Tensor<T>::ones({channels}), Tensor<T>::zeros({channels}), eps};
    }

    /// Normal truncated to +-2 sigma, rescaled so the sample std equals `std`.
    template <typename T>
    Tensor<T> truncated_normal(Shape shape, double std) {
        // Standard deviation of N(0,1) conditioned on |z| < 2.
        constexpr double kTruncatedStd = 0.8796256610342398;
        std::normal_distribution<double> normal(0.0, 1.0);
        Tensor<T> t(std::move(shape));
        auto& v = t.mutable_values();
        for (Index i = 0; i < v.size(); ++i) {
            double z;
            do {
                z = normal(engine_);
            } while (std::abs(z) >= 2.0);
            v[i] = static_cast<T>(z / kTruncatedStd * std);
        }
        return t;
    }

private:
    std::mt19937_64 engine_;
    double gain_;
};

}  // namespace cubeformer

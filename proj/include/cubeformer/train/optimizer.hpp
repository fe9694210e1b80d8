#pragma once

#include <cstdint>
#include <vector>

#include "cubeformer/numerics/tensor.hpp"

namespace cubeformer {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Moment buffers mirror the parameter list; `step` counts completed updates.
template <typename T>
struct OptimizerState {
    std::vector<VectorX<T>> m;
    std::vector<VectorX<T>> v;
    std::uint64_t step = 0;

    static OptimizerState zeros_like(const std::vector<Tensor<T>>& params);
};

/// Bias-corrected Adam, in place:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
///   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, const std::vector<VectorX<T>>& grads, OptimizerState<T>& state, double lr,
               const AdamConfig& cfg = {});

/// Same, reading gradients from the tensors (missing gradient = zero).
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, OptimizerState<T>& state, double lr, const AdamConfig& cfg = {});

}  // namespace cubeformer

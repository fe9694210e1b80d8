#pragma once

#include "cubeformer/numerics/tensor.hpp"

namespace cubeformer {

/// Mean absolute error over all elements. Returns a shape-(1) tensor.
template <typename T>
Tensor<T> spatial_loss(const Tensor<T>& pred, const Tensor<T>& gt);

/// (C,H,W) or (H,W) inputs. Each channel of pred - gt is zero-padded at the
/// bottom/right to power-of-two extents and transformed; the loss is the mean
/// absolute value over all real and imaginary parts.
template <typename T>
Tensor<T> frequency_loss(const Tensor<T>& pred, const Tensor<T>& gt);

template <typename T>
struct LossTerms {
    Tensor<T> spatial;
    Tensor<T> frequency;
    Tensor<T> total;  // spatial + lambda * frequency
};

template <typename T>
LossTerms<T> total_loss(const Tensor<T>& pred, const Tensor<T>& gt, double lambda);

}  // namespace cubeformer

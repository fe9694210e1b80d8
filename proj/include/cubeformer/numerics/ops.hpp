#pragma once

#include <array>
#include <span>
#include <vector>

#include "cubeformer/numerics/tensor.hpp"

namespace cubeformer {

// Elementwise arithmetic with numpy-style broadcasting (trailing axes aligned).
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> neg(const Tensor<T>& a);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul_scalar(a, s); }
template <typename T> Tensor<T> operator*(T s, const Tensor<T>& a) { return mul_scalar(a, s); }

Shape broadcast_shape(const Shape& a, const Shape& b);

/// (m,k) x (k,n) -> (m,n).
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Pointwise activations.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);  // tanh approximation
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> abs(const Tensor<T>& x);

// Layout.
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order);
/// Elements [start, end) along `axis`.
template <typename T> Tensor<T> slice(const Tensor<T>& x, std::size_t axis, Index start, Index end);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T> std::vector<Tensor<T>> split(const Tensor<T>& x, std::size_t axis, const std::vector<Index>& sizes);

/// out[i] = x[index[i]], reshaped to `shape`. Backward scatter-adds.
template <typename T> Tensor<T> gather(const Tensor<T>& x, std::span<const Index> index, Shape shape);

enum class PadMode { zero, reflect };
/// Pads the last two axes of a (C,H,W) tensor.
template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, Index top, Index bottom, Index left, Index right, PadMode mode = PadMode::zero);

// Reductions.
template <typename T> Tensor<T> sum(const Tensor<T>& x);   // -> shape (1)
template <typename T> Tensor<T> mean(const Tensor<T>& x);  // -> shape (1)
/// Sum over one axis, keeping it with extent 1.
template <typename T> Tensor<T> sum(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> mean(const Tensor<T>& x, std::size_t axis);

// Spatial ops on (C,H,W).
template <typename T> Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, Index out_h, Index out_w);
template <typename T> Tensor<T> max_pool2d(const Tensor<T>& x, Index kernel, Index stride);
template <typename T> Tensor<T> upsample_nearest(const Tensor<T>& x, Index out_h, Index out_w);
/// Half-pixel centres (align_corners = false), edge-clamped.
template <typename T> Tensor<T> upsample_bilinear(const Tensor<T>& x, Index out_h, Index out_w);

/// Cross-correlation of x (C_in,H,W) with weight (C_out,C_in,kh,kw), zero padding.
/// `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Index stride = 1, Index pad = 0);

/// Per-channel cross-correlation; weight is (C,1,kh,kw).
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Index stride = 1,
                           Index pad = 0);

/// Normalizes axis 0 at every position of the remaining axes (population variance).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-6);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

/// (C*s*s,H,W) -> (C,sH,sW); element (c*s*s + u*s + v, i, j) lands at (c, i*s+u, j*s+v).
template <typename T> Tensor<T> pixel_shuffle(const Tensor<T>& x, Index scale);
template <typename T> Tensor<T> pixel_unshuffle(const Tensor<T>& x, Index scale);

}  // namespace cubeformer

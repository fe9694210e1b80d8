#pragma once

#include <complex>
#include <vector>

#include "cubeformer/numerics/tensor.hpp"

namespace cubeformer {

inline bool is_power_of_two(Index n) { return n > 0 && (n & (n - 1)) == 0; }

inline Index next_power_of_two(Index n) {
    Index p = 1;
    while (p < n) p <<= 1;
    return p;
}

/// In-place iterative radix-2 transform of a row-major (rows, cols) complex grid.
/// `inverse` uses the conjugate kernel and does not normalize.
template <typename T>
void fft2_inplace(std::vector<std::complex<T>>& grid, Index rows, Index cols, bool inverse);

/// Unnormalized forward 2D DFT of a real (H,W) tensor. The result has shape
/// (H,W,2) holding real and imaginary parts. Backward applies the
/// conjugate-transpose transform to the output gradient.
template <typename T>
Tensor<T> fft2(const Tensor<T>& x);

/// Normalized inverse of fft2 for an (H,W,2) spectrum; returns the (H,W,2) signal.
/// Not differentiable.
template <typename T>
Tensor<T> ifft2(const Tensor<T>& spectrum);

}  // namespace cubeformer

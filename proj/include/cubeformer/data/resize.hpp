#pragma once

#include <Eigen/SparseCore>

#include "cubeformer/data/image.hpp"

namespace cubeformer {

/// Keys cubic convolution kernel.
inline double cubic_kernel(double x, double a = -0.5) {
    x = std::abs(x);
    if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
    return 0.0;
}

/// Row-normalized (out x in) resampling matrix along one axis. When shrinking,
/// the kernel is stretched by in/out (antialiasing). Out-of-range taps are
/// clamped to the nearest edge sample.
Eigen::SparseMatrix<double, Eigen::RowMajor> resize_weights(Index in, Index out);

Plane bicubic_resize(const Plane& src, Index out_h, Index out_w);

/// Throws SizeError when an output extent is < 1.
ImageBuffer bicubic_resize(const ImageBuffer& img, Index out_h, Index out_w);

}  // namespace cubeformer

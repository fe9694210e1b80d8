#include "cubeformer/data/resize.hpp"

#include <cmath>
#include <vector>

namespace cubeformer {

Eigen::SparseMatrix<double, Eigen::RowMajor> resize_weights(Index in, Index out) {
    if (in < 1 || out < 1) throw SizeError("resize: extents must be >= 1");
    const double scale = static_cast<double>(out) / static_cast<double>(in);
    const double stretch = scale < 1.0 ? scale : 1.0;
    const double support = 2.0 / stretch;
    std::vector<Eigen::Triplet<double>> triplets;
    std::vector<double> w;
    for (Index i = 0; i < out; ++i) {
        const double u = (static_cast<double>(i) + 0.5) / scale - 0.5;
        const auto lo = static_cast<Index>(std::floor(u - support));
        const auto hi = static_cast<Index>(std::ceil(u + support));
        w.assign(static_cast<std::size_t>(hi - lo + 1), 0.0);
        double total = 0.0;
        for (Index j = lo; j <= hi; ++j) {
            const double k = cubic_kernel((static_cast<double>(j) - u) * stretch);
            w[static_cast<std::size_t>(j - lo)] = k;
            total += k;
        }
        for (Index j = lo; j <= hi; ++j) {
            const double k = w[static_cast<std::size_t>(j - lo)];
            if (k == 0.0) continue;
            const Index src = j < 0 ? 0 : (j >= in ? in - 1 : j);
            triplets.emplace_back(i, src, k / total);
        }
    }
    Eigen::SparseMatrix<double, Eigen::RowMajor> m(out, in);
    m.setFromTriplets(triplets.begin(), triplets.end());
    return m;
}

Plane bicubic_resize(const Plane& src, Index out_h, Index out_w) {
    if (out_h < 1 || out_w < 1) throw SizeError("bicubic_resize: output extents must be >= 1");
    const auto rows = resize_weights(src.rows(), out_h);
    const auto cols = resize_weights(src.cols(), out_w);
    const Eigen::MatrixXd s = src.cast<double>().matrix();
    const Eigen::MatrixXd tmp = rows * s;
    const Eigen::MatrixXd out = (cols * tmp.transpose()).transpose();
    return out.cast<float>().array();
}

ImageBuffer bicubic_resize(const ImageBuffer& img, Index out_h, Index out_w) {
    ImageBuffer out;
    out.space = img.space;
    for (int c = 0; c < 3; ++c) out.channels[c] = bicubic_resize(img.channels[c], out_h, out_w);
    out.clamp();
    return out;
}

}  // namespace cubeformer

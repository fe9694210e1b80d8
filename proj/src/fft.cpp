#include "cubeformer/numerics/fft.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <utility>

namespace cubeformer {

namespace {

template <typename T>
void fft1d(std::complex<T>* a, Index n, Index stride, bool inverse) {
    for (Index i = 1, j = 0; i < n; ++i) {
        Index bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i * stride], a[j * stride]);
    }
    for (Index len = 2; len <= n; len <<= 1) {
        const double angle = (inverse ? 2.0 : -2.0) * std::numbers::pi / static_cast<double>(len);
        for (Index k = 0; k < len / 2; ++k) {
            // Twiddles evaluated directly in double so error does not compound.
            const std::complex<T> wk(static_cast<T>(std::cos(angle * static_cast<double>(k))),
                                     static_cast<T>(std::sin(angle * static_cast<double>(k))));
            for (Index i = 0; i < n; i += len) {
                std::complex<T>& lo = a[(i + k) * stride];
                std::complex<T>& hi = a[(i + k + len / 2) * stride];
                const std::complex<T> t = hi * wk;
                hi = lo - t;
                lo += t;
            }
        }
    }
}

void check_sizes(Index rows, Index cols) {
    if (!is_power_of_two(rows) || !is_power_of_two(cols)) {
        throw SizeError("fft2: extents must be powers of two, got " + std::to_string(rows) + "x" + std::to_string(cols));
    }
}

}  // namespace

template <typename T>
void fft2_inplace(std::vector<std::complex<T>>& grid, Index rows, Index cols, bool inverse) {
    check_sizes(rows, cols);
    if (static_cast<Index>(grid.size()) != rows * cols) throw ShapeError("fft2: grid size mismatch");
    for (Index r = 0; r < rows; ++r) fft1d(grid.data() + r * cols, cols, 1, inverse);
    for (Index c = 0; c < cols; ++c) fft1d(grid.data() + c, rows, cols, inverse);
}

template <typename T>
Tensor<T> fft2(const Tensor<T>& x) {
    if (x.ndim() != 2) throw ShapeError("fft2: expected (H,W) tensor, got " + shape_str(x.shape()));
    const Index h = x.dim(0), w = x.dim(1);
    check_sizes(h, w);
    std::vector<std::complex<T>> grid(static_cast<std::size_t>(h * w));
    for (Index i = 0; i < h * w; ++i) grid[static_cast<std::size_t>(i)] = x[i];
    fft2_inplace(grid, h, w, false);
    VectorX<T> out(2 * h * w);
    for (Index i = 0; i < h * w; ++i) {
        out[2 * i] = grid[static_cast<std::size_t>(i)].real();
        out[2 * i + 1] = grid[static_cast<std::size_t>(i)].imag();
    }
    return make_result<T>({h, w, 2}, std::move(out), {x}, [h, w](TensorNode<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        // dL/dx = Re(F^H g) for real x.
        std::vector<std::complex<T>> gg(static_cast<std::size_t>(h * w));
        for (Index i = 0; i < h * w; ++i) gg[static_cast<std::size_t>(i)] = {self.grad[2 * i], self.grad[2 * i + 1]};
        fft2_inplace(gg, h, w, true);
        for (Index i = 0; i < h * w; ++i) (*g)[i] += gg[static_cast<std::size_t>(i)].real();
    });
}

template <typename T>
Tensor<T> ifft2(const Tensor<T>& spectrum) {
    if (spectrum.ndim() != 3 || spectrum.dim(2) != 2) {
        throw ShapeError("ifft2: expected (H,W,2) spectrum, got " + shape_str(spectrum.shape()));
    }
    const Index h = spectrum.dim(0), w = spectrum.dim(1);
    std::vector<std::complex<T>> grid(static_cast<std::size_t>(h * w));
    for (Index i = 0; i < h * w; ++i) grid[static_cast<std::size_t>(i)] = {spectrum[2 * i], spectrum[2 * i + 1]};
    fft2_inplace(grid, h, w, true);
    VectorX<T> out(2 * h * w);
    const T norm = T(1) / static_cast<T>(h * w);
    for (Index i = 0; i < h * w; ++i) {
        out[2 * i] = grid[static_cast<std::size_t>(i)].real() * norm;
        out[2 * i + 1] = grid[static_cast<std::size_t>(i)].imag() * norm;
    }
    return Tensor<T>({h, w, 2}, std::move(out));
}

template void fft2_inplace(std::vector<std::complex<float>>&, Index, Index, bool);
template void fft2_inplace(std::vector<std::complex<double>>&, Index, Index, bool);
template Tensor<float> fft2(const Tensor<float>&);
template Tensor<double> fft2(const Tensor<double>&);
template Tensor<float> ifft2(const Tensor<float>&);
template Tensor<double> ifft2(const Tensor<double>&);

}  // namespace cubeformer

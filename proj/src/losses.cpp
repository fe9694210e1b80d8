#include "cubeformer/train/losses.hpp"

#include "cubeformer/numerics/fft.hpp"
#include "cubeformer/numerics/ops.hpp"

namespace cubeformer {

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* who) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(who) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    }
}

}  // namespace

template <typename T>
Tensor<T> spatial_loss(const Tensor<T>& pred, const Tensor<T>& gt) {
    require_same_shape(pred, gt, "spatial_loss");
    return mean(abs(pred - gt));
}

template <typename T>
Tensor<T> frequency_loss(const Tensor<T>& pred, const Tensor<T>& gt) {
    require_same_shape(pred, gt, "frequency_loss");
    if (pred.ndim() == 2) return frequency_loss(reshape(pred, {1, pred.dim(0), pred.dim(1)}), reshape(gt, {1, gt.dim(0), gt.dim(1)}));
    if (pred.ndim() != 3) throw ShapeError("frequency_loss: expected (C,H,W) or (H,W), got " + shape_str(pred.shape()));
    const Index c = pred.dim(0), h = pred.dim(1), w = pred.dim(2);
    const Index ph = next_power_of_two(h), pw = next_power_of_two(w);
    Tensor<T> diff = pred - gt;
    if (ph != h || pw != w) diff = pad2d(diff, 0, ph - h, 0, pw - w);
    std::vector<Tensor<T>> spectra;
    spectra.reserve(static_cast<std::size_t>(c));
    for (Index k = 0; k < c; ++k) spectra.push_back(fft2(reshape(slice(diff, 0, k, k + 1), {ph, pw})));
    return mean(abs(c == 1 ? spectra.front() : concat(spectra, 0)));
}

template <typename T>
LossTerms<T> total_loss(const Tensor<T>& pred, const Tensor<T>& gt, double lambda) {
    if (!(lambda >= 0.0)) throw ConfigurationError("total_loss: lambda must be >= 0");
    LossTerms<T> out{spatial_loss(pred, gt), frequency_loss(pred, gt), Tensor<T>()};
    out.total = lambda == 0.0 ? out.spatial : out.spatial + mul_scalar(out.frequency, static_cast<T>(lambda));
    return out;
}

#define CUBEFORMER_INSTANTIATE_LOSSES(T)                                        \
    template Tensor<T> spatial_loss(const Tensor<T>&, const Tensor<T>&);       \
    template Tensor<T> frequency_loss(const Tensor<T>&, const Tensor<T>&);     \
    template LossTerms<T> total_loss(const Tensor<T>&, const Tensor<T>&, double);

CUBEFORMER_INSTANTIATE_LOSSES(float)
CUBEFORMER_INSTANTIATE_LOSSES(double)

}  // namespace cubeformer

#include "cubeformer/train/optimizer.hpp"

#include <cmath>

namespace cubeformer {

template <typename T>
OptimizerState<T> OptimizerState<T>::zeros_like(const std::vector<Tensor<T>>& params) {
    OptimizerState s;
    for (const auto& p : params) {
        s.m.push_back(VectorX<T>::Zero(p.numel()));
        s.v.push_back(VectorX<T>::Zero(p.numel()));
    }
    return s;
}

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, const std::vector<VectorX<T>>& grads, OptimizerState<T>& state, double lr,
               const AdamConfig& cfg) {
    if (state.m.empty() && state.step == 0) state = OptimizerState<T>::zeros_like(params);
    if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ShapeError("adam_step: parameter, gradient and state counts differ");
    }
    const std::uint64_t t = state.step + 1;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].mutable_values();
        const auto& g = grads[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
            throw ShapeError("adam_step: buffer length mismatch for parameter " + std::to_string(i));
        }
        m = static_cast<T>(cfg.beta1) * m + static_cast<T>(1.0 - cfg.beta1) * g;
        v = static_cast<T>(cfg.beta2) * v + static_cast<T>(1.0 - cfg.beta2) * g.cwiseAbs2();
        for (Index k = 0; k < p.size(); ++k) {
            const double mh = static_cast<double>(m[k]) / c1;
            const double vh = static_cast<double>(v[k]) / c2;
            p[k] = static_cast<T>(static_cast<double>(p[k]) - lr * mh / (std::sqrt(vh) + cfg.eps));
        }
    }
    state.step = t;
}

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, OptimizerState<T>& state, double lr, const AdamConfig& cfg) {
    std::vector<VectorX<T>> grads;
    grads.reserve(params.size());
    for (const auto& p : params) grads.push_back(p.has_grad() ? p.grad() : VectorX<T>::Zero(p.numel()));
    adam_step(params, grads, state, lr, cfg);
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void adam_step(std::vector<Tensor<float>>&, const std::vector<VectorX<float>>&, OptimizerState<float>&, double,
                        const AdamConfig&);
template void adam_step(std::vector<Tensor<double>>&, const std::vector<VectorX<double>>&, OptimizerState<double>&,
                        double, const AdamConfig&);
template void adam_step(std::vector<Tensor<float>>&, OptimizerState<float>&, double, const AdamConfig&);
template void adam_step(std::vector<Tensor<double>>&, OptimizerState<double>&, double, const AdamConfig&);

}  // namespace cubeformer

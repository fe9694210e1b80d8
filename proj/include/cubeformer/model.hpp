#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cubeformer/blocks.hpp"

namespace cubeformer {

enum class Variant { full, lite };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct ModelConfig {
    Variant variant = Variant::full;
    Index n_groups = 6;
    Index channels = 64;
    Index scale = 2;
    BlockConfig block;

    /// Throws ConfigurationError on head/cube/scale incompatibilities.
    void validate() const;

    /// Channels seen by the transformer blocks (halved for lite).
    Index attention_channels() const { return variant == Variant::lite ? channels / 2 : channels; }

    /// LR extents must be multiples of these.
    Index height_multiple() const;
    Index width_multiple() const;

    /// `key=value` lines, one per field, in a fixed order.
    std::string to_text() const;
    static ModelConfig from_text(const std::string& text);

    bool operator==(const ModelConfig& other) const { return to_text() == other.to_text(); }
};

template <typename T>
struct NamedTensor {
    std::string path;
    Tensor<T> tensor;
};

/// CubeFormer / CubeFormer-lite:
///   X_s = conv3x3(I_lr);  X_d = backbone(X_s) + X_s;  I_hr = pixel_shuffle(conv3x3(X_d)).
template <typename T>
class CubeFormer {
public:
    CubeFormer(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    std::uint64_t seed() const { return seed_; }

    /// (3,H,W) -> (3,sH,sW). H and W must be multiples of height_multiple()/width_multiple().
    Tensor<T> forward(const Tensor<T>& lr) const;

    /// forward() for arbitrary sizes: reflect-pads to the next valid size and crops the result.
    Tensor<T> upscale(const Tensor<T>& lr) const;

    Tensor<T> shallow_features(const Tensor<T>& lr) const;
    Tensor<T> backbone(const Tensor<T>& features) const;
    Tensor<T> restore(const Tensor<T>& deep) const;

    /// Every parameter in a stable, path-ordered enumeration. Handles alias the model's storage.
    std::vector<NamedTensor<T>> named_parameters();
    std::vector<Tensor<T>> parameters();
    void visit(const ParamVisitor<T>& fn);

    void set_requires_grad(bool flag);
    void zero_grad();

    template <typename U>
    CubeFormer<U> cast() const;

    ConvParams<T>& shallow() { return shallow_; }
    std::vector<CtgParams<T>>& groups() { return groups_; }
    ConvParams<T>& head() { return head_; }

private:
    ModelConfig config_;
    std::uint64_t seed_;
    ConvParams<T> shallow_;
    std::vector<CtgParams<T>> groups_;
    ConvParams<T> head_;
};

template <typename T>
CubeFormer<T> init_parameters(const ModelConfig& config, std::uint64_t seed) {
    return CubeFormer<T>(config, seed);
}

template <typename T>
template <typename U>
CubeFormer<U> CubeFormer<T>::cast() const {
    CubeFormer<U> out(config_, seed_);
    auto self = const_cast<CubeFormer<T>*>(this)->named_parameters();
    auto target = out.named_parameters();
    for (std::size_t i = 0; i < self.size(); ++i) {
        target[i].tensor.mutable_values() = self[i].tensor.values().template cast<U>();
    }
    return out;
}

struct ParamReport {
    std::int64_t total = 0;
    std::vector<std::pair<std::string, std::int64_t>> per_path;
    /// Totals keyed by block prefix, e.g. "groups.0.mbconv", "shallow", "head".
    std::vector<std::pair<std::string, std::int64_t>> per_block;
};

template <typename T>
ParamReport param_count(CubeFormer<T>& model);

/// Published parameter totals for the default width-64, six-group configuration.
std::optional<std::int64_t> reference_param_count(Variant variant, Index scale);

struct FlopsReport {
    std::int64_t total = 0;
    std::vector<std::pair<std::string, std::int64_t>> per_block;
};

/// 2 * multiply-accumulates of every convolution (plus one add per output for
/// bias) and of the q k^T and A v products inside every cube. Pointwise
/// activations, normalization and pooling are not counted.
FlopsReport flops_estimate(const ModelConfig& config, Index height, Index width);

std::int64_t conv_flops(Index in_channels, Index out_channels, Index kernel, Index out_h, Index out_w,
                        bool depthwise = false, bool bias = true);

/// Cost of the affinity and aggregation products of one multi-head cube attention.
std::int64_t attention_core_flops(Index channels, Index height, Index width, Index heads, const CubeSpec& spec);

}  // namespace cubeformer

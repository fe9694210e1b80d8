#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>

#include <Eigen/Core>

#include "cubeformer/numerics/tensor.hpp"

namespace cubeformer {

enum class ColorSpace { rgb, ycbcr };

using Plane = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using PlaneD = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// H x W x 3 image with values in [0,1], stored planar.
struct ImageBuffer {
    std::array<Plane, 3> channels;
    ColorSpace space = ColorSpace::rgb;

    ImageBuffer() = default;
    ImageBuffer(Index height, Index width, float fill = 0.0f, ColorSpace cs = ColorSpace::rgb);

    Index height() const { return channels[0].rows(); }
    Index width() const { return channels[0].cols(); }

    void clamp();
    bool operator==(const ImageBuffer& o) const;
};

/// BT.601 studio-swing luma, Y = (16 + 65.481 R + 128.553 G + 24.966 B) / 255.
/// Throws UsageError unless the buffer is tagged RGB.
PlaneD rgb_to_y(const ImageBuffer& img);

/// Full YCbCr conversion (studio swing), tagged ycbcr.
ImageBuffer rgb_to_ycbcr(const ImageBuffer& img);

template <typename T>
Tensor<T> to_tensor(const ImageBuffer& img);

/// (3,H,W) tensor -> image, clamped to [0,1].
template <typename T>
ImageBuffer from_tensor(const Tensor<T>& t);

/// 8- or 16-bit PNG; grayscale is replicated to three channels, alpha dropped.
ImageBuffer load_image(const std::filesystem::path& path);

/// 8-bit RGB PNG, value v stored as floor(255 v + 0.5).
void save_image(const ImageBuffer& img, const std::filesystem::path& path);

/// The 8-bit code save_image writes for a [0,1] value.
inline std::uint8_t quantize_u8(float v) {
    const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    return static_cast<std::uint8_t>(std::floor(static_cast<double>(c) * 255.0 + 0.5));
}

}  // namespace cubeformer

#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cubeformer/data/image.hpp"

namespace cubeformer {

struct ImagePair {
    std::string name;
    ImageBuffer hr;
    ImageBuffer lr;
    int scale = 2;
};

/// Crops HR to a multiple of `scale` and downsamples bicubically. The result is
/// quantized to 8 bits so that a cached copy on disk loads back identically.
ImageBuffer synthesize_lr(const ImageBuffer& hr, int scale);

/// Crops the bottom/right edge so both extents are multiples of `scale`.
ImageBuffer mod_crop(const ImageBuffer& img, int scale);

/// root/HR/*.png, optionally paired by stem with root/LR_x{s}/*.png.
class DatasetIndex {
public:
    struct Entry {
        std::string stem;
        std::filesystem::path hr;
        std::optional<std::filesystem::path> lr;
    };

    /// Sorted by stem. Throws IoError if root/HR is missing or holds no PNGs.
    static DatasetIndex scan(const std::filesystem::path& root, int scale);

    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }
    int scale() const { return scale_; }
    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path lr_dir() const;

    /// Loads HR and LR. A missing LR is synthesized and, when `cache` is set,
    /// written to LR_x{s}/<stem>.png (a failed write is not an error).
    ImagePair load(std::size_t i, bool cache = true) const;

private:
    std::filesystem::path root_;
    int scale_ = 2;
    std::vector<Entry> entries_;
};

/// Rotations are counter-clockwise; perm[c] is the source channel of output c.
struct AugmentDraw {
    bool flip = false;
    int rotation = 0;  // 0, 90 or 270
    std::array<int, 3> perm{0, 1, 2};

    bool operator==(const AugmentDraw&) const = default;
};

AugmentDraw draw_augment(std::mt19937_64& rng);
ImageBuffer apply_augment(const ImageBuffer& img, const AugmentDraw& d);

/// Same draw applied to both. Throws UsageError unless hr = s * lr on both axes.
std::pair<ImageBuffer, ImageBuffer> augment(const ImageBuffer& hr, const ImageBuffer& lr, std::mt19937_64& rng);

struct PatchPair {
    ImageBuffer lr;
    ImageBuffer hr;
    Index top = 0;
    Index left = 0;
};

ImageBuffer crop(const ImageBuffer& img, Index top, Index left, Index h, Index w);

/// Uniform LR top-left over all valid positions, HR cut at `scale` times the
/// same coordinates. Returns nullopt when the LR image is smaller than lr_size.
std::optional<PatchPair> sample_patch(const ImagePair& pair, Index lr_size, int scale, std::mt19937_64& rng);

}  // namespace cubeformer

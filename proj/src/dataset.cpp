#include "cubeformer/data/dataset.hpp"

#include <algorithm>

#include "cubeformer/data/resize.hpp"

namespace cubeformer {

namespace fs = std::filesystem;

ImageBuffer mod_crop(const ImageBuffer& img, int scale) {
    const Index h = img.height() - img.height() % scale;
    const Index w = img.width() - img.width() % scale;
    if (h == 0 || w == 0) throw SizeError("image smaller than scale factor");
    return crop(img, 0, 0, h, w);
}

ImageBuffer synthesize_lr(const ImageBuffer& hr, int scale) {
    if (scale < 1) throw ConfigurationError("scale must be >= 1");
    const ImageBuffer base = mod_crop(hr, scale);
    ImageBuffer lr = bicubic_resize(base, base.height() / scale, base.width() / scale);
    for (auto& c : lr.channels) c = c.unaryExpr([](float v) { return static_cast<float>(quantize_u8(v) / 255.0); });
    return lr;
}

DatasetIndex DatasetIndex::scan(const fs::path& root, int scale) {
    DatasetIndex idx;
    idx.root_ = root;
    idx.scale_ = scale;
    const fs::path hr_dir = root / "HR";
    if (!fs::is_directory(hr_dir)) throw IoError("dataset '" + root.string() + "' has no HR/ directory");
    const fs::path lr_dir = idx.lr_dir();
    for (const auto& e : fs::directory_iterator(hr_dir)) {
        if (!e.is_regular_file() || e.path().extension() != ".png") continue;
        Entry entry{e.path().stem().string(), e.path(), std::nullopt};
        const fs::path lr = lr_dir / e.path().filename();
        if (fs::is_regular_file(lr)) entry.lr = lr;
        idx.entries_.push_back(std::move(entry));
    }
    if (idx.entries_.empty()) throw IoError("no PNG images in '" + hr_dir.string() + "'");
    std::sort(idx.entries_.begin(), idx.entries_.end(), [](const Entry& a, const Entry& b) { return a.stem < b.stem; });
    return idx;
}

fs::path DatasetIndex::lr_dir() const { return root_ / ("LR_x" + std::to_string(scale_)); }

ImagePair DatasetIndex::load(std::size_t i, bool cache) const {
    const Entry& e = entries_.at(i);
    ImagePair pair;
    pair.name = e.stem;
    pair.scale = scale_;
    pair.hr = load_image(e.hr);
    if (e.lr) {
        pair.lr = load_image(*e.lr);
        const Index h = pair.lr.height() * scale_, w = pair.lr.width() * scale_;
        if (pair.hr.height() < h || pair.hr.width() < w) {
            throw SizeError("LR image '" + e.lr->string() + "' is larger than HR / scale");
        }
        pair.hr = crop(pair.hr, 0, 0, h, w);
        return pair;
    }
    pair.hr = mod_crop(pair.hr, scale_);
    pair.lr = synthesize_lr(pair.hr, scale_);
    if (cache) {
        try {
            fs::create_directories(lr_dir());
            const fs::path target = lr_dir() / (e.stem + ".png");
            auto tmp = target;
            tmp += ".tmp";
            save_image(pair.lr, tmp);
            fs::rename(tmp, target);
        } catch (const std::exception&) {
            // read-only datasets still work, just without the cache
        }
    }
    return pair;
}

AugmentDraw draw_augment(std::mt19937_64& rng) {
    AugmentDraw d;
    d.flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    static constexpr int kRotations[3] = {0, 90, 270};
    d.rotation = kRotations[std::uniform_int_distribution<int>(0, 2)(rng)];
    // uniform over the 6 permutations
    int k = std::uniform_int_distribution<int>(0, 5)(rng);
    std::array<int, 3> p{0, 1, 2};
    for (int i = 0; i < k; ++i) std::next_permutation(p.begin(), p.end());
    d.perm = p;
    return d;
}

namespace {

Plane transform_plane(const Plane& p, const AugmentDraw& d) {
    Plane out = d.flip ? Plane(p.rowwise().reverse()) : p;
    if (d.rotation == 90) {
        out = Plane(out.transpose()).colwise().reverse();
    } else if (d.rotation == 270) {
        out = Plane(out.transpose()).rowwise().reverse();
    } else if (d.rotation != 0) {
        throw UsageError("augment: rotation must be 0, 90 or 270");
    }
    return out;
}

}  // namespace

ImageBuffer apply_augment(const ImageBuffer& img, const AugmentDraw& d) {
    ImageBuffer out;
    out.space = img.space;
    for (int c = 0; c < 3; ++c) out.channels[c] = transform_plane(img.channels[d.perm[c]], d);
    return out;
}

std::pair<ImageBuffer, ImageBuffer> augment(const ImageBuffer& hr, const ImageBuffer& lr, std::mt19937_64& rng) {
    if (lr.height() == 0 || hr.height() % lr.height() != 0 || hr.width() % lr.width() != 0 ||
        hr.height() / lr.height() != hr.width() / lr.width()) {
        throw UsageError("augment: HR patch is not an integer multiple of the LR patch");
    }
    const AugmentDraw d = draw_augment(rng);
    return {apply_augment(hr, d), apply_augment(lr, d)};
}

ImageBuffer crop(const ImageBuffer& img, Index top, Index left, Index h, Index w) {
    if (top < 0 || left < 0 || h < 0 || w < 0 || top + h > img.height() || left + w > img.width()) {
        throw SizeError("crop window exceeds image bounds");
    }
    ImageBuffer out;
    out.space = img.space;
    for (int c = 0; c < 3; ++c) out.channels[c] = img.channels[c].block(top, left, h, w);
    return out;
}

std::optional<PatchPair> sample_patch(const ImagePair& pair, Index lr_size, int scale, std::mt19937_64& rng) {
    const Index lh = pair.lr.height(), lw = pair.lr.width();
    if (lh < lr_size || lw < lr_size || pair.hr.height() < lh * scale || pair.hr.width() < lw * scale) {
        return std::nullopt;
    }
    PatchPair p;
    p.top = std::uniform_int_distribution<Index>(0, lh - lr_size)(rng);
    p.left = std::uniform_int_distribution<Index>(0, lw - lr_size)(rng);
    p.lr = crop(pair.lr, p.top, p.left, lr_size, lr_size);
    p.hr = crop(pair.hr, p.top * scale, p.left * scale, lr_size * scale, lr_size * scale);
    return p;
}

}  // namespace cubeformer

#include "cubeformer/data/image.hpp"

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>
#include <vector>

namespace cubeformer {

ImageBuffer::ImageBuffer(Index height, Index width, float fill, ColorSpace cs) : space(cs) {
    for (auto& c : channels) c = Plane::Constant(height, width, fill);
}

void ImageBuffer::clamp() {
    for (auto& c : channels) c = c.max(0.0f).min(1.0f);
}

bool ImageBuffer::operator==(const ImageBuffer& o) const {
    if (space != o.space || height() != o.height() || width() != o.width()) return false;
    for (int c = 0; c < 3; ++c) {
        if (!(channels[c] == o.channels[c]).all()) return false;
    }
    return true;
}

PlaneD rgb_to_y(const ImageBuffer& img) {
    if (img.space != ColorSpace::rgb) throw UsageError("rgb_to_y: image is not tagged RGB");
    const auto r = img.channels[0].cast<double>();
    const auto g = img.channels[1].cast<double>();
    const auto b = img.channels[2].cast<double>();
    return (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0;
}

ImageBuffer rgb_to_ycbcr(const ImageBuffer& img) {
    const PlaneD y = rgb_to_y(img);
    const auto r = img.channels[0].cast<double>();
    const auto g = img.channels[1].cast<double>();
    const auto b = img.channels[2].cast<double>();
    ImageBuffer out;
    out.space = ColorSpace::ycbcr;
    out.channels[0] = y.cast<float>();
    out.channels[1] = ((128.0 - 37.797 * r - 74.203 * g + 112.0 * b) / 255.0).cast<float>();
    out.channels[2] = ((128.0 + 112.0 * r - 93.786 * g - 18.214 * b) / 255.0).cast<float>();
    out.clamp();
    return out;
}

template <typename T>
Tensor<T> to_tensor(const ImageBuffer& img) {
    const Index h = img.height(), w = img.width();
    VectorX<T> data(3 * h * w);
    for (int c = 0; c < 3; ++c) {
        Eigen::Map<Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(data.data() + c * h * w, h, w) =
            img.channels[c].template cast<T>();
    }
    return Tensor<T>({3, h, w}, std::move(data));
}

template <typename T>
ImageBuffer from_tensor(const Tensor<T>& t) {
    if (t.ndim() != 3 || t.dim(0) != 3) throw ShapeError("from_tensor: expected (3,H,W), got " + shape_str(t.shape()));
    const Index h = t.dim(1), w = t.dim(2);
    ImageBuffer img;
    for (int c = 0; c < 3; ++c) {
        img.channels[c] =
            Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(t.data() + c * h * w, h, w)
                .template cast<float>();
    }
    img.clamp();
    return img;
}

template Tensor<float> to_tensor(const ImageBuffer&);
template Tensor<double> to_tensor(const ImageBuffer&);
template ImageBuffer from_tensor(const Tensor<float>&);
template ImageBuffer from_tensor(const Tensor<double>&);

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
    auto* where = static_cast<std::string*>(png_get_error_ptr(png));
    if (where) *where = msg;
    png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

}  // namespace

ImageBuffer load_image(const std::filesystem::path& path) {
    FilePtr file(std::fopen(path.string().c_str(), "rb"));
    if (!file) throw IoError("cannot open image '" + path.string() + "'");
    png_byte sig[8];
    if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw IoError("'" + path.string() + "' is not a PNG file");
    }
    std::string error;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, png_warn);
    if (!png) throw IoError("libpng initialisation failed");
    png_infop info = png_create_info_struct(png);
    ImageBuffer img;
    std::vector<png_bytep> rows;
    std::vector<png_byte> pixels;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed to decode '" + path.string() + "': " + error);
    }
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int bit_depth = png_get_bit_depth(png, info);
    const int color_type = png_get_color_type(png, info);
    if (bit_depth != 8 && bit_depth != 16 && color_type != PNG_COLOR_TYPE_PALETTE && color_type != PNG_COLOR_TYPE_GRAY) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("'" + path.string() + "': unsupported bit depth " + std::to_string(bit_depth));
    }
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (bit_depth == 16) png_set_swap(png);
    png_read_update_info(png, info);

    const Index w = png_get_image_width(png, info);
    const Index h = png_get_image_height(png, info);
    const int depth = png_get_bit_depth(png, info);
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    pixels.resize(rowbytes * static_cast<std::size_t>(h));
    rows.resize(static_cast<std::size_t>(h));
    for (Index y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = pixels.data() + static_cast<std::size_t>(y) * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    img = ImageBuffer(h, w);
    for (Index y = 0; y < h; ++y) {
        const png_byte* row = rows[static_cast<std::size_t>(y)];
        for (Index x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                if (depth == 16) {
                    std::uint16_t v;
                    std::memcpy(&v, row + (x * 3 + c) * 2, 2);
                    img.channels[c](y, x) = static_cast<float>(v / 65535.0);
                } else {
                    img.channels[c](y, x) = static_cast<float>(row[x * 3 + c] / 255.0);
                }
            }
        }
    }
    return img;
}

void save_image(const ImageBuffer& img, const std::filesystem::path& path) {
    if (img.space != ColorSpace::rgb) throw UsageError("save_image: only RGB buffers can be written");
    FilePtr file(std::fopen(path.string().c_str(), "wb"));
    if (!file) throw IoError("cannot open '" + path.string() + "' for writing");
    const Index h = img.height(), w = img.width();
    std::vector<png_byte> pixels(static_cast<std::size_t>(h * w * 3));
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) pixels[static_cast<std::size_t>((y * w + x) * 3 + c)] = quantize_u8(img.channels[c](y, x));

    std::string error;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, png_warn);
    if (!png) throw IoError("libpng initialisation failed");
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed to encode '" + path.string() + "': " + error);
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (Index y = 0; y < h; ++y) png_write_row(png, pixels.data() + y * w * 3);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    if (std::fflush(file.get()) != 0) throw IoError("failed writing '" + path.string() + "'");
}

}  // namespace cubeformer

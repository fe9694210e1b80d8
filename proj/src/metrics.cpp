#include "cubeformer/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

namespace cubeformer {

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;

void require_same_shape(const PlaneD& a, const PlaneD& b, const char* who) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(who) + ": image shapes differ (" + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) +
                         ")");
    }
}

// Valid-mode separable filtering with the SSIM window.
PlaneD filter_valid(const PlaneD& x, const std::vector<double>& g) {
    const Index oh = x.rows() - kWindow + 1, ow = x.cols() - kWindow + 1;
    PlaneD rows(oh, x.cols());
    rows.setZero();
    for (int k = 0; k < kWindow; ++k) rows += g[k] * x.middleRows(k, oh);
    PlaneD out(oh, ow);
    out.setZero();
    for (int k = 0; k < kWindow; ++k) out += g[k] * rows.middleCols(k, ow);
    return out;
}

}  // namespace

double psnr(const PlaneD& a, const PlaneD& b, double peak) {
    require_same_shape(a, b, "psnr");
    if (a.size() == 0) throw SizeError("psnr: empty image");
    const double mse = (a - b).square().mean();
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

std::vector<double> ssim_window_1d() {
    std::vector<double> g(kWindow);
    double total = 0.0;
    for (int i = 0; i < kWindow; ++i) {
        const double d = i - kWindow / 2;
        g[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
        total += g[i];
    }
    for (auto& v : g) v /= total;
    return g;
}

double ssim(const PlaneD& a, const PlaneD& b) {
    require_same_shape(a, b, "ssim");
    if (a.rows() < kWindow || a.cols() < kWindow) {
        throw SizeError("ssim: image " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                        " is smaller than the 11x11 window");
    }
    constexpr double c1 = (0.01 * 1.0) * (0.01 * 1.0);
    constexpr double c2 = (0.03 * 1.0) * (0.03 * 1.0);
    const auto g = ssim_window_1d();
    const PlaneD mu_a = filter_valid(a, g);
    const PlaneD mu_b = filter_valid(b, g);
    const PlaneD var_a = filter_valid(a * a, g) - mu_a * mu_a;
    const PlaneD var_b = filter_valid(b * b, g) - mu_b * mu_b;
    const PlaneD cov = filter_valid(a * b, g) - mu_a * mu_b;
    const PlaneD map = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) /
                       ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
    return map.mean();
}

Score evaluate(const ImageBuffer& output, const ImageBuffer& gt, int scale) {
    if (output.height() != gt.height() || output.width() != gt.width()) {
        throw ShapeError("evaluate: output " + std::to_string(output.height()) + "x" + std::to_string(output.width()) +
                         " does not match ground truth " + std::to_string(gt.height()) + "x" +
                         std::to_string(gt.width()));
    }
    const Index b = scale;
    const Index h = gt.height() - 2 * b, w = gt.width() - 2 * b;
    if (h < 1 || w < 1) throw SizeError("evaluate: image too small for a " + std::to_string(b) + " px border crop");
    const PlaneD ya = rgb_to_y(output).block(b, b, h, w);
    const PlaneD yb = rgb_to_y(gt).block(b, b, h, w);
    return {psnr(ya, yb), ssim(ya, yb)};
}

double EvalReport::mean_psnr() const {
    double s = 0.0;
    for (const auto& r : rows) s += r.psnr;
    return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

double EvalReport::mean_ssim() const {
    double s = 0.0;
    for (const auto& r : rows) s += r.ssim;
    return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

std::string EvalReport::to_table() const {
    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof buf, "model: %s  scale: x%d  border crop: %d px\n", model_id.c_str(), scale, border);
    os << buf;
    std::snprintf(buf, sizeof buf, "%-24s %10s %8s\n", "image", "PSNR(dB)", "SSIM");
    os << buf;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%-24s %10.4f %8.4f\n", r.name.c_str(), r.psnr, r.ssim);
        os << buf;
    }
    std::snprintf(buf, sizeof buf, "%-24s %10.4f %8.4f\n", "mean", mean_psnr(), mean_ssim());
    os << buf;
    return os.str();
}

std::string EvalReport::to_jsonl() const {
    std::ostringstream os;
    for (const auto& r : rows) {
        nlohmann::ordered_json j{{"image", r.name}, {"psnr", r.psnr}, {"ssim", r.ssim}};
        os << j.dump() << '\n';
    }
    nlohmann::ordered_json s{{"summary", true},          {"images", rows.size()}, {"mean_psnr", mean_psnr()},
                             {"mean_ssim", mean_ssim()}, {"scale", scale},        {"border", border},
                             {"model", model_id}};
    os << s.dump() << '\n';
    return os.str();
}

}  // namespace cubeformer

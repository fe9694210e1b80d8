#pragma once

#include <string>
#include <vector>

#include "cubeformer/data/image.hpp"

namespace cubeformer {

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(peak^2 / MSE) in dB; zero MSE reports kPsnrCap.
double psnr(const PlaneD& a, const PlaneD& b, double peak = 1.0);

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
/// dynamic range 1, averaged over valid window positions.
/// Throws SizeError when either extent is below 11.
double ssim(const PlaneD& a, const PlaneD& b);

/// Normalized 1-D Gaussian taps of the SSIM window.
std::vector<double> ssim_window_1d();

struct Score {
    double psnr = 0.0;
    double ssim = 0.0;
};

/// Y channel of both images, `scale` pixels cropped from every border.
Score evaluate(const ImageBuffer& output, const ImageBuffer& gt, int scale);

struct EvalRow {
    std::string name;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct EvalReport {
    std::vector<EvalRow> rows;
    int scale = 2;
    int border = 2;
    std::string model_id;

    void add(std::string name, const Score& s) { rows.push_back({std::move(name), s.psnr, s.ssim}); }
    double mean_psnr() const;
    double mean_ssim() const;

    /// Human-readable table.
    std::string to_table() const;
    /// One JSON object per image followed by a summary object.
    std::string to_jsonl() const;
};

}  // namespace cubeformer

#pragma once

// Reconstruction losses and image metrics.
//
// SSIM uses an 11x11 Gaussian window (sigma 1.5), k1 = 0.01, k2 = 0.03 and a
// dynamic range of 1. Window sums are zero-padded "same" correlations, the
// per-pixel SSIM map is averaged over pixels and then over channels.

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "msgs/core.hpp"

namespace msgs {

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
const std::array<double, kSsimWindow>& ssim_window_1d();

template <typename T>
struct LossValue {
    T value = 0;
    std::vector<T> grad;  ///< d value / d pred, same layout as pred
};

template <typename T>
LossValue<T> l1_loss(ImageView<T> pred, ImageView<T> gt);

/// Mean SSIM and, when `grad` is non-null, its gradient w.r.t. `a`.
template <typename T>
T ssim(ImageView<T> a, ImageView<T> b, std::vector<T>* grad = nullptr);

/// (1 - w) * L1 + w * (1 - SSIM) / 2 with exact gradient.
template <typename T>
LossValue<T> image_loss(ImageView<T> pred, ImageView<T> gt, double dssim_weight);

/// 10 log10(peak^2 / MSE), 100 dB when MSE < 1e-10.
template <typename T>
double psnr(ImageView<T> pred, ImageView<T> gt, double peak = 1.0);

/// PSNR of one channel of an interleaved image.
template <typename T>
double psnr_channel(ImageView<T> pred, ImageView<T> gt, int channel, double peak = 1.0);

struct LossBreakdown {
    double l_ms = 0;
    double l_rgb = 0;
    double l_total = 0;
    double lambda_ms = 0;
    double lambda_rgb = 0;
};

template <typename T>
struct DualLossResult {
    LossBreakdown breakdown;
    std::vector<T> grad_ms;   ///< empty when the MS branch is inactive
    std::vector<T> grad_rgb;  ///< empty when the RGB branch is inactive
};

/// Weighted sum of the active branches. Missing ground truth for an active
/// branch throws ContractViolation; invalid weights throw ConfigError.
template <typename T>
DualLossResult<T> dual_loss(std::optional<ImageView<T>> pred_ms, std::optional<ImageView<T>> gt_ms,
                            std::optional<ImageView<T>> pred_rgb, std::optional<ImageView<T>> gt_rgb,
                            const TrainConfig& config);

}  // namespace msgs

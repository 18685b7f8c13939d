#include "msgs/losses.hpp"

#include <array>
#include <cmath>
#include <string>

namespace msgs {

const std::array<double, kSsimWindow>& ssim_window_1d() {
    static const std::array<double, kSsimWindow> taps = [] {
        std::array<double, kSsimWindow> t{};
        double sum = 0;
        for (int i = 0; i < kSsimWindow; ++i) {
            const double d = i - kSsimWindow / 2;
            t[static_cast<std::size_t>(i)] = std::exp(-d * d / (2 * kSsimSigma * kSsimSigma));
            sum += t[static_cast<std::size_t>(i)];
        }
        for (auto& v : t) v /= sum;
        return t;
    }();
    return taps;
}

namespace {

void require_same_shape(const char* op, int h1, int w1, int c1, int h2, int w2, int c2) {
    if (h1 != h2 || w1 != w2 || c1 != c2)
        throw ContractViolation(std::string(op) + ": shape mismatch " + std::to_string(h1) + "x" + std::to_string(w1) +
                                "x" + std::to_string(c1) + " vs " + std::to_string(h2) + "x" + std::to_string(w2) +
                                "x" + std::to_string(c2));
}

template <typename T>
void require_same_shape(const char* op, const ImageView<T>& a, const ImageView<T>& b) {
    require_same_shape(op, a.height, a.width, a.channels, b.height, b.width, b.channels);
    if (a.data.size() != static_cast<std::size_t>(a.height) * a.width * a.channels ||
        b.data.size() != a.data.size())
        throw ContractViolation(std::string(op) + ": image buffer length does not match its shape");
}

/// Zero-padded separable Gaussian filter of one h x w plane (in place via tmp).
template <typename T>
void gaussian_filter(const std::vector<T>& in, std::vector<T>& out, std::vector<T>& tmp, int h, int w) {
    const auto& k = ssim_window_1d();
    constexpr int r = kSsimWindow / 2;
    tmp.assign(in.size(), T(0));
    out.assign(in.size(), T(0));
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            T acc = 0;
            for (int d = -r; d <= r; ++d) {
                const int xx = x + d;
                if (xx < 0 || xx >= w) continue;
                acc += static_cast<T>(k[static_cast<std::size_t>(d + r)]) * in[static_cast<std::size_t>(y * w + xx)];
            }
            tmp[static_cast<std::size_t>(y * w + x)] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            T acc = 0;
            for (int d = -r; d <= r; ++d) {
                const int yy = y + d;
                if (yy < 0 || yy >= h) continue;
                acc += static_cast<T>(k[static_cast<std::size_t>(d + r)]) * tmp[static_cast<std::size_t>(yy * w + x)];
            }
            out[static_cast<std::size_t>(y * w + x)] = acc;
        }
}

}  // namespace

template <typename T>
LossValue<T> l1_loss(ImageView<T> pred, ImageView<T> gt) {
    require_same_shape("l1_loss", pred, gt);
    LossValue<T> out;
    const std::size_t n = pred.data.size();
    out.grad.resize(n);
    const T inv = T(1) / static_cast<T>(n);
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T d = pred.data[i] - gt.data[i];
        sum += std::abs(static_cast<double>(d));
        out.grad[i] = d > T(0) ? inv : (d < T(0) ? -inv : T(0));
    }
    out.value = static_cast<T>(sum / static_cast<double>(n));
    return out;
}

template <typename T>
T ssim(ImageView<T> a, ImageView<T> b, std::vector<T>* grad) {
    require_same_shape("ssim", a, b);
    const int h = a.height, w = a.width, nc = a.channels;
    const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    const T c1 = static_cast<T>(kSsimK1 * kSsimK1), c2 = static_cast<T>(kSsimK2 * kSsimK2);
    if (grad) grad->assign(a.data.size(), T(0));
    const T norm = T(1) / static_cast<T>(plane * static_cast<std::size_t>(nc));

    double total = 0;
    std::vector<T> pa(plane), pb(plane), tmp, mu_a, mu_b, e_aa, e_bb, e_ab, sq;
    std::vector<T> g_mu(plane), g_ee(plane), g_eab(plane), f_mu, f_ee, f_eab;
    for (int c = 0; c < nc; ++c) {
        for (std::size_t p = 0; p < plane; ++p) {
            pa[p] = a.data[p * static_cast<std::size_t>(nc) + static_cast<std::size_t>(c)];
            pb[p] = b.data[p * static_cast<std::size_t>(nc) + static_cast<std::size_t>(c)];
        }
        gaussian_filter(pa, mu_a, tmp, h, w);
        gaussian_filter(pb, mu_b, tmp, h, w);
        sq.resize(plane);
        for (std::size_t p = 0; p < plane; ++p) sq[p] = pa[p] * pa[p];
        gaussian_filter(sq, e_aa, tmp, h, w);
        for (std::size_t p = 0; p < plane; ++p) sq[p] = pb[p] * pb[p];
        gaussian_filter(sq, e_bb, tmp, h, w);
        for (std::size_t p = 0; p < plane; ++p) sq[p] = pa[p] * pb[p];
        gaussian_filter(sq, e_ab, tmp, h, w);

        for (std::size_t p = 0; p < plane; ++p) {
            const T ma = mu_a[p], mb = mu_b[p];
            const T s_aa = e_aa[p] - ma * ma, s_bb = e_bb[p] - mb * mb, s_ab = e_ab[p] - ma * mb;
            const T a1 = T(2) * ma * mb + c1, a2 = T(2) * s_ab + c2;
            const T b1 = ma * ma + mb * mb + c1, b2 = s_aa + s_bb + c2;
            const T s = (a1 * a2) / (b1 * b2);
            total += static_cast<double>(s);
            if (grad) {
                const T inv_b = T(1) / (b1 * b2);
                g_mu[p] = norm * (T(2) * mb * a2 * inv_b - T(2) * mb * a1 * inv_b - T(2) * ma * s / b1 + T(2) * ma * s / b2);
                g_ee[p] = norm * (-s / b2);
                g_eab[p] = norm * (T(2) * a1 * inv_b);
            }
        }
        if (grad) {
            // the window is symmetric, so the adjoint of the filter is the filter itself
            gaussian_filter(g_mu, f_mu, tmp, h, w);
            gaussian_filter(g_ee, f_ee, tmp, h, w);
            gaussian_filter(g_eab, f_eab, tmp, h, w);
            for (std::size_t p = 0; p < plane; ++p)
                (*grad)[p * static_cast<std::size_t>(nc) + static_cast<std::size_t>(c)] =
                    f_mu[p] + T(2) * pa[p] * f_ee[p] + pb[p] * f_eab[p];
        }
    }
    return static_cast<T>(total / static_cast<double>(plane * static_cast<std::size_t>(nc)));
}

template <typename T>
LossValue<T> image_loss(ImageView<T> pred, ImageView<T> gt, double dssim_weight) {
    require_same_shape("image_loss", pred, gt);
    if (dssim_weight < 0 || dssim_weight > 1) throw ContractViolation("image_loss: dssim weight outside [0, 1]");
    auto out = l1_loss(pred, gt);
    const T w = static_cast<T>(dssim_weight);
    out.value *= (T(1) - w);
    for (auto& g : out.grad) g *= (T(1) - w);
    if (dssim_weight > 0) {
        std::vector<T> g_ssim;
        const T s = ssim(pred, gt, &g_ssim);
        out.value += w * (T(1) - s) / T(2);
        for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad[i] -= w / T(2) * g_ssim[i];
    }
    return out;
}

template <typename T>
double psnr(ImageView<T> pred, ImageView<T> gt, double peak) {
    require_same_shape("psnr", pred, gt);
    if (!(peak > 0)) throw DomainError("psnr: peak must be positive");
    double mse = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double d = static_cast<double>(pred.data[i]) - static_cast<double>(gt.data[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(pred.data.size());
    if (mse < 1e-10) return 100.0;
    return 10.0 * std::log10(peak * peak / mse);
}

template <typename T>
double psnr_channel(ImageView<T> pred, ImageView<T> gt, int channel, double peak) {
    require_same_shape("psnr_channel", pred, gt);
    if (channel < 0 || channel >= pred.channels) throw ContractViolation("psnr_channel: channel out of range");
    if (!(peak > 0)) throw DomainError("psnr: peak must be positive");
    double mse = 0;
    const std::size_t plane = static_cast<std::size_t>(pred.height) * static_cast<std::size_t>(pred.width);
    for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = p * static_cast<std::size_t>(pred.channels) + static_cast<std::size_t>(channel);
        const double d = static_cast<double>(pred.data[i]) - static_cast<double>(gt.data[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(plane);
    if (mse < 1e-10) return 100.0;
    return 10.0 * std::log10(peak * peak / mse);
}

template <typename T>
DualLossResult<T> dual_loss(std::optional<ImageView<T>> pred_ms, std::optional<ImageView<T>> gt_ms,
                            std::optional<ImageView<T>> pred_rgb, std::optional<ImageView<T>> gt_rgb,
                            const TrainConfig& config) {
    if (config.lambda_ms < 0 || config.lambda_rgb < 0) throw ConfigError("loss weights must be nonnegative");
    if (config.loss_mode == LossMode::Dual && !(config.lambda_ms + config.lambda_rgb > 0))
        throw ConfigError("lambda_ms + lambda_rgb must be positive in dual mode");
    const bool use_ms = config.loss_mode != LossMode::RgbOnly;
    const bool use_rgb = config.loss_mode != LossMode::MsOnly;

    DualLossResult<T> out;
    auto& br = out.breakdown;
    br.lambda_ms = config.lambda_ms;
    br.lambda_rgb = config.lambda_rgb;
    if (use_ms) {
        if (!pred_ms || !gt_ms) throw ContractViolation("dual_loss: multispectral prediction and ground truth required");
        auto v = image_loss(*pred_ms, *gt_ms, config.dssim_weight);
        br.l_ms = static_cast<double>(v.value);
        out.grad_ms = std::move(v.grad);
        for (auto& g : out.grad_ms) g *= static_cast<T>(config.lambda_ms);
    }
    if (use_rgb) {
        if (!pred_rgb || !gt_rgb) throw ContractViolation("dual_loss: RGB prediction and ground truth required");
        auto v = image_loss(*pred_rgb, *gt_rgb, config.dssim_weight);
        br.l_rgb = static_cast<double>(v.value);
        out.grad_rgb = std::move(v.grad);
        for (auto& g : out.grad_rgb) g *= static_cast<T>(config.lambda_rgb);
    }
    br.l_total = br.lambda_ms * br.l_ms + br.lambda_rgb * br.l_rgb;
    return out;
}

#define MSGS_INSTANTIATE_LOSSES(T)                                                                               \
    template LossValue<T> l1_loss<T>(ImageView<T>, ImageView<T>);                                                \
    template T ssim<T>(ImageView<T>, ImageView<T>, std::vector<T>*);                                             \
    template LossValue<T> image_loss<T>(ImageView<T>, ImageView<T>, double);                                     \
    template double psnr<T>(ImageView<T>, ImageView<T>, double);                                                 \
    template double psnr_channel<T>(ImageView<T>, ImageView<T>, int, double);                                    \
    template DualLossResult<T> dual_loss<T>(std::optional<ImageView<T>>, std::optional<ImageView<T>>,            \
                                            std::optional<ImageView<T>>, std::optional<ImageView<T>>,            \
                                            const TrainConfig&);

MSGS_INSTANTIATE_LOSSES(float)
MSGS_INSTANTIATE_LOSSES(double)

}  // namespace msgs

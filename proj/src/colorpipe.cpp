#include "msgs/colorpipe.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace msgs {

namespace {

constexpr double kCieTable[][3] = {
#include "cie1931_table.inc"
};
constexpr std::size_t kCieRows = sizeof(kCieTable) / sizeof(kCieTable[0]);
static_assert(kCieRows == 471, "CMF table must cover 360..830 nm at 1 nm");

// chromaticities of the sRGB primaries and of D65
constexpr double kPrimaries[3][2] = {{0.64, 0.33}, {0.30, 0.60}, {0.15, 0.06}};
constexpr double kD65x = 0.3127, kD65y = 0.3290;

double det3(const Mat3d& m) {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

Mat3d inverse3(const Mat3d& m) {
    const double d = det3(m);
    if (!(std::abs(d) > 1e-12)) throw ConfigError("colour matrix is singular");
    Mat3d inv{};
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / d;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / d;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / d;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / d;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / d;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / d;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / d;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / d;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / d;
    return inv;
}

}  // namespace

// ---------------------------------------------------------------------------

CmfTable::CmfTable() {
    xbar_.reserve(kCieRows);
    ybar_.reserve(kCieRows);
    zbar_.reserve(kCieRows);
    for (const auto& row : kCieTable) {
        xbar_.push_back(row[0]);
        ybar_.push_back(row[1]);
        zbar_.push_back(row[2]);
    }
}

const CmfTable& CmfTable::cie1931() {
    static const CmfTable table;
    return table;
}

Vec3d CmfTable::at(double nm) const {
    if (!(nm >= kCmfMinNm && nm <= kCmfMaxNm))
        throw DomainError("wavelength " + std::to_string(nm) + " nm outside CMF support [360, 830]");
    const double pos = nm - kCmfMinNm;
    const auto i0 = static_cast<std::size_t>(std::floor(pos));
    const double f = pos - static_cast<double>(i0);
    if (f == 0.0 || i0 + 1 >= size()) return {xbar_[i0], ybar_[i0], zbar_[i0]};
    return {xbar_[i0] + f * (xbar_[i0 + 1] - xbar_[i0]), ybar_[i0] + f * (ybar_[i0 + 1] - ybar_[i0]),
            zbar_[i0] + f * (zbar_[i0 + 1] - zbar_[i0])};
}

ResampledCmf resample_cmf(const SpectralBasis& basis, bool quadrature_weights) {
    const auto& table = CmfTable::cie1931();
    ResampledCmf out;
    out.basis = basis;
    const int n = basis.band_count();
    for (int b = 0; b < n; ++b) {
        const Vec3d v = table.at(basis[b]);
        double w = 1.0;
        if (quadrature_weights && n > 1) {
            const double lo = b > 0 ? basis[b - 1] : basis[b];
            const double hi = b + 1 < n ? basis[b + 1] : basis[b];
            w = 0.5 * (hi - lo);
        }
        out.x.push_back(v[0] * w);
        out.y.push_back(v[1] * w);
        out.z.push_back(v[2] * w);
    }
    return out;
}

template <typename T>
std::array<T, 3> spectral_to_xyz(std::span<const T> spectrum, const ResampledCmf& cmf) {
    if (spectrum.size() != cmf.x.size())
        throw ContractViolation("spectral_to_xyz: spectrum has " + std::to_string(spectrum.size()) +
                                " bands, CMF has " + std::to_string(cmf.x.size()));
    T x = 0, y = 0, z = 0;
    for (std::size_t b = 0; b < spectrum.size(); ++b) {
        x += spectrum[b] * static_cast<T>(cmf.x[b]);
        y += spectrum[b] * static_cast<T>(cmf.y[b]);
        z += spectrum[b] * static_cast<T>(cmf.z[b]);
    }
    return {x, y, z};
}

// ---------------------------------------------------------------------------

Vec3d white_point_xyz(const ColorPipeConfig& cfg) {
    switch (cfg.white_point) {
        case WhitePoint::D65: return {kD65x / kD65y, 1.0, (1.0 - kD65x - kD65y) / kD65y};
        case WhitePoint::EqualEnergy: return {1.0, 1.0, 1.0};
        case WhitePoint::Custom:
            if (!(cfg.custom_white[1] > 0)) throw ConfigError("custom white point needs Y > 0");
            return {cfg.custom_white[0] / cfg.custom_white[1], 1.0, cfg.custom_white[2] / cfg.custom_white[1]};
    }
    return {1, 1, 1};
}

Mat3d srgb_matrix_for_white(const Vec3d& white) {
    Mat3d p{};  // columns: XYZ of each primary at Y = 1
    for (int c = 0; c < 3; ++c) {
        const double x = kPrimaries[c][0], y = kPrimaries[c][1];
        p[0][c] = x / y;
        p[1][c] = 1.0;
        p[2][c] = (1.0 - x - y) / y;
    }
    const Mat3d pinv = inverse3(p);
    Vec3d s{};
    for (int r = 0; r < 3; ++r) s[r] = pinv[r][0] * white[0] + pinv[r][1] * white[1] + pinv[r][2] * white[2];
    Mat3d rgb_to_xyz{};
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) rgb_to_xyz[r][c] = p[r][c] * s[c];
    return inverse3(rgb_to_xyz);
}

void validate_color_config(const ColorPipeConfig& cfg) {
    if (cfg.xyz_to_linear_rgb && !(std::abs(det3(*cfg.xyz_to_linear_rgb)) > 1e-12))
        throw ConfigError("xyz_to_linear_rgb matrix is not invertible");
    if (cfg.gamma_mode == GammaMode::Power && !(cfg.gamma > 0)) throw ConfigError("gamma exponent must be positive");
    (void)white_point_xyz(cfg);
}

ColorPipe::ColorPipe(const SpectralBasis& basis, const ColorPipeConfig& cfg)
    : cfg_(cfg), cmf_(resample_cmf(basis, cfg.quadrature_weights)) {
    validate_color_config(cfg);
    const Vec3d white = white_point_xyz(cfg);
    matrix_ = cfg.xyz_to_linear_rgb ? *cfg.xyz_to_linear_rgb : srgb_matrix_for_white(white);
    if (cfg.apply_white_balance) {
        // scene white: a flat unit spectrum pushed through the resampled CMFs
        double sx = 0, sy = 0, sz = 0;
        for (int b = 0; b < cmf_.bands(); ++b) {
            sx += cmf_.x[static_cast<std::size_t>(b)];
            sy += cmf_.y[static_cast<std::size_t>(b)];
            sz += cmf_.z[static_cast<std::size_t>(b)];
        }
        // a basis entirely outside a CMF lobe (e.g. only near-infrared bands) has no
        // white for that component; leave it unscaled
        constexpr double tiny = 1e-12;
        wb_[0] = (sx > tiny && sy > tiny) ? white[0] * sy / sx : 1.0;
        wb_[2] = (sz > tiny && sy > tiny) ? white[2] * sy / sz : 1.0;
    }
}

template <typename T>
std::array<T, 3> ColorPipe::xyz_to_linear(const std::array<T, 3>& xyz) const {
    const std::array<T, 3> b{xyz[0] * static_cast<T>(wb_[0]), xyz[1] * static_cast<T>(wb_[1]),
                             xyz[2] * static_cast<T>(wb_[2])};
    std::array<T, 3> out{};
    for (int r = 0; r < 3; ++r)
        out[static_cast<std::size_t>(r)] = static_cast<T>(matrix_[r][0]) * b[0] + static_cast<T>(matrix_[r][1]) * b[1] +
                                           static_cast<T>(matrix_[r][2]) * b[2];
    return out;
}

template <typename T>
T encode_channel(T v, const ColorPipeConfig& cfg) {
    if (!cfg.apply_gamma) return v;
    if (cfg.gamma_mode == GammaMode::Srgb)
        return v <= T(0.0031308) ? T(12.92) * v : T(1.055) * std::pow(v, T(1) / T(2.4)) - T(0.055);
    return v > T(0) ? std::pow(v, T(1) / static_cast<T>(cfg.gamma)) : T(0);
}

template <typename T>
T encode_channel_derivative(T v, const ColorPipeConfig& cfg) {
    if (!cfg.apply_gamma) return T(1);
    if (cfg.gamma_mode == GammaMode::Srgb)
        return v <= T(0.0031308) ? T(12.92) : T(1.055) / T(2.4) * std::pow(v, T(1) / T(2.4) - T(1));
    const T inv_g = T(1) / static_cast<T>(cfg.gamma);
    return v > T(0) ? inv_g * std::pow(v, inv_g - T(1)) : T(0);
}

template <typename T>
std::array<T, 3> ColorPipe::spectrum_to_rgb(std::span<const T> spectrum) const {
    auto lin = xyz_to_linear(spectral_to_xyz(spectrum, cmf_));
    for (auto& v : lin) v = encode_channel(v, cfg_);
    return lin;
}

template <typename T>
void ColorPipe::spectrum_to_rgb_vjp(std::span<const T> spectrum, const std::array<T, 3>& grad_rgb,
                                    std::span<T> grad_spectrum) const {
    std::array<T, 3> g_lin = grad_rgb;
    if (cfg_.apply_gamma) {
        const auto lin = xyz_to_linear(spectral_to_xyz(spectrum, cmf_));
        for (int c = 0; c < 3; ++c)
            g_lin[static_cast<std::size_t>(c)] *= encode_channel_derivative(lin[static_cast<std::size_t>(c)], cfg_);
    }
    std::array<T, 3> g_xyz{};
    for (int k = 0; k < 3; ++k) {
        T acc = 0;
        for (int r = 0; r < 3; ++r) acc += static_cast<T>(matrix_[r][k]) * g_lin[static_cast<std::size_t>(r)];
        g_xyz[static_cast<std::size_t>(k)] = acc * static_cast<T>(wb_[static_cast<std::size_t>(k)]);
    }
    for (std::size_t b = 0; b < grad_spectrum.size(); ++b)
        grad_spectrum[b] += g_xyz[0] * static_cast<T>(cmf_.x[b]) + g_xyz[1] * static_cast<T>(cmf_.y[b]) +
                            g_xyz[2] * static_cast<T>(cmf_.z[b]);
}

template <typename T>
std::array<T, 3> xyz_to_rgb(const std::array<T, 3>& xyz, const ColorPipeConfig& cfg, const ResampledCmf& cmf) {
    const ColorPipe pipe(cmf.basis, cfg);
    auto rgb = pipe.xyz_to_linear(xyz);
    for (auto& v : rgb) {
        v = encode_channel(v, cfg);
        if (cfg.apply_gamma) v = std::clamp(v, T(0), T(1));
    }
    return rgb;
}

template <typename T>
void clamp_for_output(RgbImage<T>& image) {
    for (auto& v : image.data)
        v = image.color_space == ColorSpace::EncodedRGB ? std::clamp(v, T(0), T(1)) : std::max(v, T(0));
}

// ---------------------------------------------------------------------------

template <typename T>
RgbImage<T> convert_pixel_level(const SpectralImage<T>& image, const ColorPipe& pipe) {
    if (image.basis != pipe.cmf().basis) throw ContractViolation("convert_pixel_level: image basis differs from pipe basis");
    RgbImage<T> out(image.height, image.width, pipe.output_space());
    const std::size_t n = static_cast<std::size_t>(image.bands());
#pragma omp parallel for schedule(static)
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            const auto rgb = pipe.spectrum_to_rgb<T>(std::span<const T>(image.data.data() + image.pixel_offset(y, x), n));
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = rgb[static_cast<std::size_t>(c)];
        }
    return out;
}

template <typename T>
RgbImage<T> convert_pixel_level(const SpectralImage<T>& image, const ColorPipeConfig& cfg) {
    return convert_pixel_level(image, ColorPipe(image.basis, cfg));
}

template <typename T>
std::vector<T> convert_pixel_level_vjp(const SpectralImage<T>& image, const ColorPipe& pipe, std::span<const T> grad_rgb) {
    const std::size_t pixels = static_cast<std::size_t>(image.height) * static_cast<std::size_t>(image.width);
    if (grad_rgb.size() != pixels * 3) throw ContractViolation("convert_pixel_level_vjp: gradient has the wrong shape");
    const std::size_t n = static_cast<std::size_t>(image.bands());
    std::vector<T> grad(image.data.size(), T(0));
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t pp = 0; pp < static_cast<std::ptrdiff_t>(pixels); ++pp) {
        const auto p = static_cast<std::size_t>(pp);
        pipe.spectrum_to_rgb_vjp<T>(std::span<const T>(image.data.data() + p * n, n),
                                    {grad_rgb[3 * p], grad_rgb[3 * p + 1], grad_rgb[3 * p + 2]},
                                    std::span<T>(grad.data() + p * n, n));
    }
    return grad;
}

template <typename T>
std::vector<T> convert_gaussian_colors(std::span<const T> radiance, int bands, const ColorPipe& pipe) {
    const std::size_t nb = static_cast<std::size_t>(bands);
    const std::size_t n = radiance.size() / nb;
    std::vector<T> colors(n * 3);
    for (std::size_t i = 0; i < n; ++i) {
        const auto rgb = pipe.spectrum_to_rgb<T>(radiance.subspan(i * nb, nb));
        for (int c = 0; c < 3; ++c) colors[3 * i + static_cast<std::size_t>(c)] = rgb[static_cast<std::size_t>(c)];
    }
    return colors;
}

template <typename T>
void convert_gaussian_colors_vjp(std::span<const T> radiance, int bands, const ColorPipe& pipe,
                                 std::span<const T> grad_colors, std::span<T> grad_radiance) {
    const std::size_t nb = static_cast<std::size_t>(bands);
    const std::size_t n = radiance.size() / nb;
    for (std::size_t i = 0; i < n; ++i) {
        const std::array<T, 3> g{grad_colors[3 * i], grad_colors[3 * i + 1], grad_colors[3 * i + 2]};
        if (g[0] == T(0) && g[1] == T(0) && g[2] == T(0)) continue;
        pipe.spectrum_to_rgb_vjp<T>(radiance.subspan(i * nb, nb), g, grad_radiance.subspan(i * nb, nb));
    }
}

template <typename T>
GaussianLevelResult<T> convert_gaussian_level(const GaussianCloud<T>& cloud, const Camera<T>& camera,
                                              const ColorPipe& pipe, const RenderSettings& settings) {
    if (cloud.basis != pipe.cmf().basis) throw ContractViolation("convert_gaussian_level: cloud basis differs from pipe basis");
    GaussianLevelResult<T> res;
    auto& ra = res.aux.render;
    ra.projection = project(cloud, camera, settings);
    ra.radiance = shade(cloud, ra.projection, &ra.pre_clamp);
    res.aux.colors = convert_gaussian_colors<T>(ra.radiance, cloud.bands(), pipe);
    ra.fingerprint = render_fingerprint(cloud, camera);
    res.image = RgbImage<T>(camera.height, camera.width, pipe.output_space());
    res.image.data = composite<T>(ra.projection, res.aux.colors, 3, camera, settings, &ra.composite);
    return res;
}

template <typename T>
ParamGradients<T> convert_gaussian_level_backward(const GaussianCloud<T>& cloud, const Camera<T>& camera,
                                                  const ColorPipe& pipe, const GaussianLevelAux<T>& aux,
                                                  std::span<const T> grad_rgb, const RenderSettings& settings) {
    const auto& ra = aux.render;
    if (ra.fingerprint != render_fingerprint(cloud, camera))
        throw ContractViolation("convert_gaussian_level_backward: aux was produced for different inputs");
    const auto cg = composite_backward<T>(ra.projection, aux.colors, 3, ra.composite, settings, grad_rgb);
    std::vector<T> grad_radiance(ra.radiance.size(), T(0));
    convert_gaussian_colors_vjp<T>(ra.radiance, cloud.bands(), pipe, cg.colors, grad_radiance);
    ParamGradients<T> out(cloud);
    project_backward(cloud, camera, ra.projection, cg, out);
    shade_backward<T>(cloud, ra.projection, ra.pre_clamp, grad_radiance, out);
    return out;
}

#define MSGS_INSTANTIATE_COLOR(T)                                                                                   \
    template std::array<T, 3> spectral_to_xyz<T>(std::span<const T>, const ResampledCmf&);                          \
    template std::array<T, 3> ColorPipe::xyz_to_linear<T>(const std::array<T, 3>&) const;                           \
    template std::array<T, 3> ColorPipe::spectrum_to_rgb<T>(std::span<const T>) const;                              \
    template void ColorPipe::spectrum_to_rgb_vjp<T>(std::span<const T>, const std::array<T, 3>&, std::span<T>) const; \
    template T encode_channel<T>(T, const ColorPipeConfig&);                                                        \
    template T encode_channel_derivative<T>(T, const ColorPipeConfig&);                                             \
    template std::array<T, 3> xyz_to_rgb<T>(const std::array<T, 3>&, const ColorPipeConfig&, const ResampledCmf&); \
    template void clamp_for_output<T>(RgbImage<T>&);                                                                \
    template RgbImage<T> convert_pixel_level<T>(const SpectralImage<T>&, const ColorPipe&);                         \
    template RgbImage<T> convert_pixel_level<T>(const SpectralImage<T>&, const ColorPipeConfig&);                   \
    template std::vector<T> convert_pixel_level_vjp<T>(const SpectralImage<T>&, const ColorPipe&, std::span<const T>); \
    template std::vector<T> convert_gaussian_colors<T>(std::span<const T>, int, const ColorPipe&);                  \
    template void convert_gaussian_colors_vjp<T>(std::span<const T>, int, const ColorPipe&, std::span<const T>,     \
                                                 std::span<T>);                                                     \
    template GaussianLevelResult<T> convert_gaussian_level<T>(const GaussianCloud<T>&, const Camera<T>&,            \
                                                              const ColorPipe&, const RenderSettings&);             \
    template ParamGradients<T> convert_gaussian_level_backward<T>(const GaussianCloud<T>&, const Camera<T>&,        \
                                                                  const ColorPipe&, const GaussianLevelAux<T>&,     \
                                                                  std::span<const T>, const RenderSettings&);

MSGS_INSTANTIATE_COLOR(float)
MSGS_INSTANTIATE_COLOR(double)

}  // namespace msgs

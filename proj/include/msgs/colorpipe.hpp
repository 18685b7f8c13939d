#pragma once

// Spectral -> XYZ -> RGB conversion using the CIE 1931 2-degree observer.
//
// Tristimulus values are plain sums over the scene's bands,
//   X = sum_b L_b xbar(l_b),  Y = sum_b L_b ybar(l_b),  Z = sum_b L_b zbar(l_b),
// followed by an optional diagonal (von Kries) white balance in XYZ, the
// XYZ -> linear RGB matrix and an optional display encoding.
//
// Conversion can run per pixel after compositing (convert_pixel_level) or per
// Gaussian before compositing (convert_gaussian_level). Both are
// differentiable; the *_vjp / *_backward functions give exact adjoints of the
// unclamped outputs.

#include <array>
#include <optional>
#include <span>
#include <vector>

#include "msgs/core.hpp"
#include "msgs/rasterizer.hpp"

namespace msgs {

using Mat3d = std::array<std::array<double, 3>, 3>;
using Vec3d = std::array<double, 3>;

/// Embedded CIE 1931 2-degree standard observer, 1 nm steps over [360, 830].
class CmfTable {
public:
    static const CmfTable& cie1931();

    [[nodiscard]] std::size_t size() const { return xbar_.size(); }
    [[nodiscard]] double wavelength(std::size_t i) const { return kCmfMinNm + static_cast<double>(i); }
    [[nodiscard]] const std::vector<double>& xbar() const { return xbar_; }
    [[nodiscard]] const std::vector<double>& ybar() const { return ybar_; }
    [[nodiscard]] const std::vector<double>& zbar() const { return zbar_; }

    /// Linear interpolation at `nm`; DomainError outside [360, 830].
    [[nodiscard]] Vec3d at(double nm) const;

private:
    CmfTable();
    std::vector<double> xbar_, ybar_, zbar_;
};

/// Colour matching functions sampled at a basis' band wavelengths.
struct ResampledCmf {
    SpectralBasis basis;
    std::vector<double> x, y, z;

    [[nodiscard]] int bands() const { return static_cast<int>(x.size()); }
};

/// Samples the embedded table at each band. With `quadrature_weights` the
/// triplets are multiplied by trapezoidal band widths (nm).
ResampledCmf resample_cmf(const SpectralBasis& basis, bool quadrature_weights = false);

/// Plain-sum tristimulus integration. ContractViolation on length mismatch.
template <typename T>
std::array<T, 3> spectral_to_xyz(std::span<const T> spectrum, const ResampledCmf& cmf);

enum class WhitePoint { D65, EqualEnergy, Custom };
enum class GammaMode { Srgb, Power };

struct ColorPipeConfig {
    bool apply_white_balance = true;
    WhitePoint white_point = WhitePoint::D65;
    Vec3d custom_white{0.95047, 1.0, 1.08883};  ///< XYZ, used with WhitePoint::Custom
    bool apply_gamma = true;
    GammaMode gamma_mode = GammaMode::Srgb;
    double gamma = 2.2;  ///< exponent for GammaMode::Power
    /// Defaults to the sRGB primaries referenced to the configured white
    /// point, which is the standard sRGB matrix for D65.
    std::optional<Mat3d> xyz_to_linear_rgb;
    bool quadrature_weights = false;
};

/// XYZ of the configured white point, normalized to Y = 1.
Vec3d white_point_xyz(const ColorPipeConfig& cfg);

/// Linear-RGB-from-XYZ matrix for sRGB primaries and the given white.
Mat3d srgb_matrix_for_white(const Vec3d& white_xyz);

/// Throws ConfigError when the matrix is singular or parameters are invalid.
void validate_color_config(const ColorPipeConfig& cfg);

/// Precomputed spectral -> RGB conversion for one basis.
class ColorPipe {
public:
    ColorPipe(const SpectralBasis& basis, const ColorPipeConfig& cfg);

    [[nodiscard]] const ResampledCmf& cmf() const { return cmf_; }
    [[nodiscard]] const ColorPipeConfig& config() const { return cfg_; }
    [[nodiscard]] const Mat3d& matrix() const { return matrix_; }
    /// Diagonal white-balance factors (1, 1, 1 when disabled).
    [[nodiscard]] const Vec3d& wb_scale() const { return wb_; }
    [[nodiscard]] ColorSpace output_space() const {
        return cfg_.apply_gamma ? ColorSpace::EncodedRGB : ColorSpace::LinearRGB;
    }

    /// White balance + matrix: XYZ -> linear RGB (unclamped).
    template <typename T>
    [[nodiscard]] std::array<T, 3> xyz_to_linear(const std::array<T, 3>& xyz) const;

    /// Full conversion before clamping.
    template <typename T>
    [[nodiscard]] std::array<T, 3> spectrum_to_rgb(std::span<const T> spectrum) const;

    /// d<g, spectrum_to_rgb(s)>/ds accumulated into `grad_spectrum`.
    template <typename T>
    void spectrum_to_rgb_vjp(std::span<const T> spectrum, const std::array<T, 3>& grad_rgb,
                             std::span<T> grad_spectrum) const;

private:
    ColorPipeConfig cfg_;
    ResampledCmf cmf_;
    Mat3d matrix_{};
    Vec3d wb_{1, 1, 1};
};

/// Encoding applied per channel (identity when gamma is disabled), and its derivative.
template <typename T>
T encode_channel(T linear, const ColorPipeConfig& cfg);
template <typename T>
T encode_channel_derivative(T linear, const ColorPipeConfig& cfg);

/// White balance (toward cfg's white, scene white computed over `cmf`), matrix,
/// encoding; encoded output clamped to [0, 1].
template <typename T>
std::array<T, 3> xyz_to_rgb(const std::array<T, 3>& xyz, const ColorPipeConfig& cfg, const ResampledCmf& cmf);

/// Clamps encoded images to [0, 1] and linear images below at 0.
template <typename T>
void clamp_for_output(RgbImage<T>& image);

/// Per-pixel conversion of a spectral image (unclamped).
template <typename T>
RgbImage<T> convert_pixel_level(const SpectralImage<T>& image, const ColorPipe& pipe);
template <typename T>
RgbImage<T> convert_pixel_level(const SpectralImage<T>& image, const ColorPipeConfig& cfg);

/// H x W x N gradient of <grad_rgb, convert_pixel_level(image)>.
template <typename T>
std::vector<T> convert_pixel_level_vjp(const SpectralImage<T>& image, const ColorPipe& pipe,
                                       std::span<const T> grad_rgb);

/// Per-Gaussian colours for Gaussian-level conversion: [gaussian][3].
template <typename T>
std::vector<T> convert_gaussian_colors(std::span<const T> radiance, int bands, const ColorPipe& pipe);

/// Backprop of convert_gaussian_colors: [gaussian][3] -> [gaussian][band], accumulated.
template <typename T>
void convert_gaussian_colors_vjp(std::span<const T> radiance, int bands, const ColorPipe& pipe,
                                 std::span<const T> grad_colors, std::span<T> grad_radiance);

template <typename T>
struct GaussianLevelAux {
    RenderAux<T> render;      ///< projection, radiance, composite records
    std::vector<T> colors;    ///< converted per-Gaussian RGB
};

template <typename T>
struct GaussianLevelResult {
    RgbImage<T> image;  ///< unclamped
    GaussianLevelAux<T> aux;
};

/// Converts each Gaussian's radiance to RGB, then composites 3 channels.
template <typename T>
GaussianLevelResult<T> convert_gaussian_level(const GaussianCloud<T>& cloud, const Camera<T>& camera,
                                              const ColorPipe& pipe, const RenderSettings& settings = {});

template <typename T>
ParamGradients<T> convert_gaussian_level_backward(const GaussianCloud<T>& cloud, const Camera<T>& camera,
                                                  const ColorPipe& pipe, const GaussianLevelAux<T>& aux,
                                                  std::span<const T> grad_rgb, const RenderSettings& settings = {});

}  // namespace msgs

#pragma once

// Domain types shared across the multispectral splatting library.
//
// Every numeric container is templated on the scalar type. The default
// profile instantiates `float`; gradient verification instantiates `double`.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace msgs {

using Real = float;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Caller broke a precondition (shape mismatch, stale aux, bad index).
class ContractViolation : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Spectral basis
// ---------------------------------------------------------------------------

inline constexpr double kCmfMinNm = 360.0;
inline constexpr double kCmfMaxNm = 830.0;

/// Ordered wavelength bands a scene is sampled at.
class SpectralBasis {
public:
    SpectralBasis() = default;
    /// Throws DomainError unless wavelengths are nonempty, strictly
    /// increasing and inside the CMF support [360, 830] nm.
    explicit SpectralBasis(std::vector<double> wavelengths_nm);

    /// `count` bands evenly spaced over [first_nm, last_nm].
    static SpectralBasis uniform(double first_nm, double last_nm, int count);

    [[nodiscard]] int band_count() const { return static_cast<int>(wavelengths_.size()); }
    [[nodiscard]] const std::vector<double>& wavelengths_nm() const { return wavelengths_; }
    [[nodiscard]] double operator[](int b) const { return wavelengths_[static_cast<std::size_t>(b)]; }

    /// Sub-basis keeping the listed band indices (must be strictly increasing).
    [[nodiscard]] SpectralBasis select(std::span<const int> band_indices) const;

    friend bool operator==(const SpectralBasis&, const SpectralBasis&) = default;

private:
    std::vector<double> wavelengths_;
};

// ---------------------------------------------------------------------------
// Gaussian cloud
// ---------------------------------------------------------------------------

inline constexpr int kMaxShDegree = 3;

constexpr int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

/// Structure-of-arrays Gaussian cloud. Geometry is stored once per Gaussian;
/// only the SH coefficients carry a band dimension.
///
/// Layouts:
///   positions      [count][3]
///   log_scales     [count][3]   log of per-axis standard deviation
///   rotations      [count][4]   quaternion (w, x, y, z)
///   opacity_logits [count]      opacity = sigmoid(logit)
///   sh_coeffs      [count][band][(L+1)^2]
template <typename T>
struct GaussianCloud {
    SpectralBasis basis;
    int sh_degree = 0;
    std::vector<T> positions;
    std::vector<T> log_scales;
    std::vector<T> rotations;
    std::vector<T> opacity_logits;
    std::vector<T> sh_coeffs;

    GaussianCloud() = default;
    GaussianCloud(SpectralBasis b, int degree, std::size_t n);

    [[nodiscard]] std::size_t size() const { return opacity_logits.size(); }
    [[nodiscard]] int bands() const { return basis.band_count(); }
    [[nodiscard]] int coeffs_per_band() const { return sh_coeff_count(sh_degree); }
    [[nodiscard]] std::size_t sh_stride() const {
        return static_cast<std::size_t>(bands()) * static_cast<std::size_t>(coeffs_per_band());
    }

    std::span<T> sh_of(std::size_t i) { return {sh_coeffs.data() + i * sh_stride(), sh_stride()}; }
    std::span<const T> sh_of(std::size_t i) const { return {sh_coeffs.data() + i * sh_stride(), sh_stride()}; }

    /// Appends one Gaussian; `sh` must hold sh_stride() values.
    void push_back(std::span<const T, 3> pos, std::span<const T, 3> log_scale,
                   std::span<const T, 4> rot, T opacity_logit, std::span<const T> sh);

    /// Keeps the rows with keep[i] == true, preserving order.
    void filter(const std::vector<bool>& keep);

    void normalize_rotations();

    template <typename U>
    [[nodiscard]] GaussianCloud<U> cast() const;
};

/// Describes every broken GaussianCloud invariant, naming field and index.
template <typename T>
std::vector<std::string> validate_cloud(const GaussianCloud<T>& cloud);

// ---------------------------------------------------------------------------
// Camera
// ---------------------------------------------------------------------------

/// Pinhole camera. world_to_camera is row-major 4x4; camera looks down +z,
/// x right, y down (pixel rows grow with y). Pixel (x, y) samples the image
/// plane at coordinate (x, y).
template <typename T>
struct Camera {
    int width = 0;
    int height = 0;
    T fx = 1, fy = 1, cx = 0, cy = 0;
    std::array<T, 16> world_to_camera{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
    T near_plane = T(0.01);
    T far_plane = T(100);

    [[nodiscard]] T rot(int r, int c) const { return world_to_camera[static_cast<std::size_t>(r * 4 + c)]; }
    [[nodiscard]] T trans(int r) const { return world_to_camera[static_cast<std::size_t>(r * 4 + 3)]; }
    /// Camera centre in world coordinates: -R^T t.
    [[nodiscard]] std::array<T, 3> center() const;

    /// Looks from `eye` at `target`; `up` is an approximate world up vector.
    static Camera look_at(int width, int height, T focal_px, std::array<T, 3> eye,
                          std::array<T, 3> target, std::array<T, 3> up);

    template <typename U>
    [[nodiscard]] Camera<U> cast() const;
};

/// Empty when the camera invariants hold.
template <typename T>
std::vector<std::string> validate_camera(const Camera<T>& cam);

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// H x W x N linear radiance cube, band index fastest.
template <typename T>
struct SpectralImage {
    int height = 0;
    int width = 0;
    SpectralBasis basis;
    std::vector<T> data;

    SpectralImage() = default;
    SpectralImage(int h, int w, SpectralBasis b)
        : height(h), width(w), basis(std::move(b)),
          data(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) *
               static_cast<std::size_t>(basis.band_count())) {}

    [[nodiscard]] int bands() const { return basis.band_count(); }
    [[nodiscard]] std::size_t pixel_offset(int y, int x) const {
        return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) *
               static_cast<std::size_t>(bands());
    }
    T& at(int y, int x, int b) { return data[pixel_offset(y, x) + static_cast<std::size_t>(b)]; }
    const T& at(int y, int x, int b) const { return data[pixel_offset(y, x) + static_cast<std::size_t>(b)]; }
};

enum class ColorSpace { LinearRGB, EncodedRGB };

template <typename T>
struct RgbImage {
    int height = 0;
    int width = 0;
    ColorSpace color_space = ColorSpace::LinearRGB;
    std::vector<T> data;

    RgbImage() = default;
    RgbImage(int h, int w, ColorSpace cs)
        : height(h), width(w), color_space(cs),
          data(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * 3) {}

    T& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    const T& at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

/// Read-only view over any interleaved H x W x C image.
template <typename T>
struct ImageView {
    std::span<const T> data;
    int height = 0;
    int width = 0;
    int channels = 0;

    ImageView(std::span<const T> d, int h, int w, int c) : data(d), height(h), width(w), channels(c) {}
    ImageView(const SpectralImage<T>& im) : data(im.data), height(im.height), width(im.width), channels(im.bands()) {}
    ImageView(const RgbImage<T>& im) : data(im.data), height(im.height), width(im.width), channels(3) {}

    [[nodiscard]] T at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    [[nodiscard]] bool same_shape(const ImageView& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

enum class ConversionStage { GaussianLevel, PixelLevel };
enum class LossMode { RgbOnly, MsOnly, Dual };

struct DensifyConfig {
    bool enabled = false;
    int interval = 100;
    double grad_threshold = 2e-4;
    double opacity_prune_threshold = 0.005;
    double scale_split_threshold = 0.05;
    int start_iter = 200;
    int stop_iter = 1500;
};

struct LearningRates {
    double position = 1.6e-4;
    double position_final = 1.6e-6;
    double scale = 5e-3;
    double rotation = 1e-3;
    double opacity = 5e-2;
    double sh0 = 2.5e-3;
    double sh_rest = 1.25e-4;
};

struct TrainConfig {
    int iterations = 2000;
    LearningRates lr;
    /// Multiplies position learning rates; 0 means use the camera extent.
    double spatial_lr_scale = 0.0;
    double lambda_ms = 1.0;
    double lambda_rgb = 1.0;
    ConversionStage conversion_stage = ConversionStage::PixelLevel;
    LossMode loss_mode = LossMode::Dual;
    double dssim_weight = 0.2;
    DensifyConfig densify;
    std::uint64_t seed = 0;
    bool apply_gamma = true;
    bool apply_white_balance = true;
    bool opacity_reset = false;
    int opacity_reset_interval = 3000;
    int eval_interval = 0;
    int checkpoint_interval = 0;
};

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

/// A point with an N-band (or RGB) base colour, e.g. from structure-from-motion.
struct PointSample {
    std::array<double, 3> position{};
    std::vector<double> spectrum;
};

template <typename T>
struct View {
    std::string name;
    Camera<T> camera;
    SpectralImage<T> spectral;
    std::optional<RgbImage<T>> rgb;
    bool test = false;
};

template <typename T>
struct Scene {
    SpectralBasis basis;
    std::vector<View<T>> views;
    std::vector<PointSample> points;
    std::optional<GaussianCloud<T>> cloud;
};

/// 1.1 x the largest distance of a camera centre from their mean (at least 1).
template <typename T>
double camera_extent(const std::vector<View<T>>& views);

/// Empty when the configuration invariants hold.
std::vector<std::string> validate_train_config(const TrainConfig& cfg);

std::string to_string(ConversionStage s);
std::string to_string(LossMode m);
ConversionStage parse_stage(const std::string& s);
LossMode parse_loss_mode(const std::string& s);

template <typename T>
inline T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
inline T logit(T p) {
    return std::log(p / (T(1) - p));
}

}  // namespace msgs

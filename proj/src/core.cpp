#include "msgs/core.hpp"

#include <algorithm>
#include <sstream>

namespace msgs {

SpectralBasis::SpectralBasis(std::vector<double> wavelengths_nm) : wavelengths_(std::move(wavelengths_nm)) {
    if (wavelengths_.empty()) throw DomainError("spectral basis needs at least one band");
    for (std::size_t i = 0; i < wavelengths_.size(); ++i) {
        const double w = wavelengths_[i];
        if (!(w >= kCmfMinNm && w <= kCmfMaxNm)) {
            std::ostringstream os;
            os << "wavelength " << w << " nm at band " << i << " outside [360, 830] nm";
            throw DomainError(os.str());
        }
        if (i > 0 && !(w > wavelengths_[i - 1])) {
            std::ostringstream os;
            os << "wavelengths not strictly increasing at band " << i;
            throw DomainError(os.str());
        }
    }
}

SpectralBasis SpectralBasis::uniform(double first_nm, double last_nm, int count) {
    if (count < 1) throw DomainError("band count must be positive");
    std::vector<double> w(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
        w[static_cast<std::size_t>(i)] =
            count == 1 ? first_nm : first_nm + (last_nm - first_nm) * static_cast<double>(i) / (count - 1);
    return SpectralBasis(std::move(w));
}

SpectralBasis SpectralBasis::select(std::span<const int> band_indices) const {
    std::vector<double> w;
    w.reserve(band_indices.size());
    for (int b : band_indices) {
        if (b < 0 || b >= band_count()) throw ContractViolation("band index " + std::to_string(b) + " out of range");
        w.push_back(wavelengths_[static_cast<std::size_t>(b)]);
    }
    return SpectralBasis(std::move(w));
}

// ---------------------------------------------------------------------------

template <typename T>
GaussianCloud<T>::GaussianCloud(SpectralBasis b, int degree, std::size_t n)
    : basis(std::move(b)), sh_degree(degree), positions(3 * n), log_scales(3 * n), rotations(4 * n),
      opacity_logits(n) {
    if (degree < 0 || degree > kMaxShDegree) throw DomainError("sh_degree must be in [0, 3]");
    sh_coeffs.assign(n * sh_stride(), T(0));
    for (std::size_t i = 0; i < n; ++i) rotations[4 * i] = T(1);
}

template <typename T>
void GaussianCloud<T>::push_back(std::span<const T, 3> pos, std::span<const T, 3> log_scale,
                                 std::span<const T, 4> rot, T opacity_logit, std::span<const T> sh) {
    if (sh.size() != sh_stride()) throw ContractViolation("push_back: sh coefficient count mismatch");
    positions.insert(positions.end(), pos.begin(), pos.end());
    log_scales.insert(log_scales.end(), log_scale.begin(), log_scale.end());
    rotations.insert(rotations.end(), rot.begin(), rot.end());
    opacity_logits.push_back(opacity_logit);
    sh_coeffs.insert(sh_coeffs.end(), sh.begin(), sh.end());
}

namespace {

template <typename T>
void filter_rows(std::vector<T>& v, std::size_t stride, const std::vector<bool>& keep) {
    std::size_t out = 0;
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (!keep[i]) continue;
        if (out != i) std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(i * stride), stride,
                                  v.begin() + static_cast<std::ptrdiff_t>(out * stride));
        ++out;
    }
    v.resize(out * stride);
}

}  // namespace

template <typename T>
void GaussianCloud<T>::filter(const std::vector<bool>& keep) {
    if (keep.size() != size()) throw ContractViolation("filter: mask length mismatch");
    filter_rows(positions, 3, keep);
    filter_rows(log_scales, 3, keep);
    filter_rows(rotations, 4, keep);
    filter_rows(opacity_logits, 1, keep);
    filter_rows(sh_coeffs, sh_stride(), keep);
}

template <typename T>
void GaussianCloud<T>::normalize_rotations() {
    for (std::size_t i = 0; i < size(); ++i) {
        T* q = rotations.data() + 4 * i;
        const T n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
        if (n > T(0)) {
            for (int k = 0; k < 4; ++k) q[k] /= n;
        } else {
            q[0] = T(1);
        }
    }
}

template <typename T>
template <typename U>
GaussianCloud<U> GaussianCloud<T>::cast() const {
    GaussianCloud<U> out;
    out.basis = basis;
    out.sh_degree = sh_degree;
    auto conv = [](const std::vector<T>& v) { return std::vector<U>(v.begin(), v.end()); };
    out.positions = conv(positions);
    out.log_scales = conv(log_scales);
    out.rotations = conv(rotations);
    out.opacity_logits = conv(opacity_logits);
    out.sh_coeffs = conv(sh_coeffs);
    return out;
}

template <typename T>
std::vector<std::string> validate_cloud(const GaussianCloud<T>& cloud) {
    std::vector<std::string> out;
    const std::size_t n = cloud.size();
    if (cloud.sh_degree < 0 || cloud.sh_degree > kMaxShDegree)
        out.push_back("sh_degree: " + std::to_string(cloud.sh_degree) + " outside [0, 3]");
    if (cloud.positions.size() != 3 * n) out.push_back("positions: length does not match count");
    if (cloud.log_scales.size() != 3 * n) out.push_back("log_scales: length does not match count");
    if (cloud.rotations.size() != 4 * n) out.push_back("rotations: length does not match count");
    if (cloud.sh_degree >= 0 && cloud.sh_degree <= kMaxShDegree && cloud.sh_coeffs.size() != n * cloud.sh_stride()) {
        std::ostringstream os;
        os << "sh_coeffs shape: " << cloud.sh_coeffs.size() << " values, expected " << n << " x "
           << cloud.bands() << " bands x " << cloud.coeffs_per_band();
        out.push_back(os.str());
    }
    if (cloud.rotations.size() == 4 * n) {
        for (std::size_t i = 0; i < n; ++i) {
            const T* q = cloud.rotations.data() + 4 * i;
            const double norm = std::sqrt(static_cast<double>(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]));
            // float storage rounds a unit quaternion to ~1e-7, well inside the bound
            if (!(std::abs(norm - 1.0) <= 1e-6)) {
                std::ostringstream os;
                os << "rotations[" << i << "]: norm " << norm << " is not 1";
                out.push_back(os.str());
            }
        }
    }
    auto check_finite = [&](const std::vector<T>& v, std::size_t stride, const char* name) {
        for (std::size_t k = 0; k < v.size(); ++k)
            if (!std::isfinite(static_cast<double>(v[k]))) {
                out.push_back(std::string(name) + "[" + std::to_string(k / stride) + "]: non-finite value");
                return;
            }
    };
    check_finite(cloud.positions, 3, "positions");
    check_finite(cloud.log_scales, 3, "log_scales");
    check_finite(cloud.opacity_logits, 1, "opacity_logits");
    if (cloud.sh_degree >= 0 && cloud.sh_degree <= kMaxShDegree && cloud.sh_stride() > 0)
        check_finite(cloud.sh_coeffs, cloud.sh_stride(), "sh_coeffs");
    return out;
}

// ---------------------------------------------------------------------------

template <typename T>
std::array<T, 3> Camera<T>::center() const {
    std::array<T, 3> c{};
    for (int i = 0; i < 3; ++i) c[static_cast<std::size_t>(i)] = -(rot(0, i) * trans(0) + rot(1, i) * trans(1) + rot(2, i) * trans(2));
    return c;
}

template <typename T>
Camera<T> Camera<T>::look_at(int width, int height, T focal_px, std::array<T, 3> eye, std::array<T, 3> target,
                             std::array<T, 3> up) {
    auto sub = [](std::array<T, 3> a, std::array<T, 3> b) { return std::array<T, 3>{a[0] - b[0], a[1] - b[1], a[2] - b[2]}; };
    auto cross = [](std::array<T, 3> a, std::array<T, 3> b) {
        return std::array<T, 3>{a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
    };
    auto normalize = [](std::array<T, 3> a) {
        const T n = std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
        if (n <= T(0)) throw DomainError("look_at: degenerate direction");
        return std::array<T, 3>{a[0] / n, a[1] / n, a[2] / n};
    };
    const auto fwd = normalize(sub(target, eye));
    // image y points down, so the camera's y axis is -up projected
    const auto right = normalize(cross(fwd, up));
    const auto down = cross(fwd, right);
    Camera cam;
    cam.width = width;
    cam.height = height;
    cam.fx = cam.fy = focal_px;
    cam.cx = T(width - 1) / T(2);
    cam.cy = T(height - 1) / T(2);
    const std::array<std::array<T, 3>, 3> rows{right, down, fwd};
    for (int r = 0; r < 3; ++r) {
        T t = 0;
        for (int c = 0; c < 3; ++c) {
            cam.world_to_camera[static_cast<std::size_t>(r * 4 + c)] = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
            t -= rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] * eye[static_cast<std::size_t>(c)];
        }
        cam.world_to_camera[static_cast<std::size_t>(r * 4 + 3)] = t;
    }
    cam.world_to_camera[12] = cam.world_to_camera[13] = cam.world_to_camera[14] = 0;
    cam.world_to_camera[15] = 1;
    return cam;
}

template <typename T>
template <typename U>
Camera<U> Camera<T>::cast() const {
    Camera<U> c;
    c.width = width;
    c.height = height;
    c.fx = static_cast<U>(fx);
    c.fy = static_cast<U>(fy);
    c.cx = static_cast<U>(cx);
    c.cy = static_cast<U>(cy);
    for (std::size_t i = 0; i < 16; ++i) c.world_to_camera[i] = static_cast<U>(world_to_camera[i]);
    c.near_plane = static_cast<U>(near_plane);
    c.far_plane = static_cast<U>(far_plane);
    return c;
}

template <typename T>
std::vector<std::string> validate_camera(const Camera<T>& cam) {
    std::vector<std::string> out;
    if (cam.width <= 0 || cam.height <= 0) out.push_back("camera: non-positive image size");
    if (!(cam.near_plane > T(0)) || !(cam.near_plane < cam.far_plane)) out.push_back("camera: need 0 < near < far");
    if (!(cam.fx > T(0)) || !(cam.fy > T(0))) out.push_back("camera: focal lengths must be positive");
    const double tol = sizeof(T) == sizeof(float) ? 1e-5 : 1e-6;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double d = 0;
            for (int k = 0; k < 3; ++k) d += static_cast<double>(cam.rot(i, k)) * static_cast<double>(cam.rot(j, k));
            if (std::abs(d - (i == j ? 1.0 : 0.0)) > tol) {
                out.push_back("camera: world_to_camera rotation is not orthonormal");
                return out;
            }
        }
    return out;
}

// ---------------------------------------------------------------------------

std::vector<std::string> validate_train_config(const TrainConfig& cfg) {
    std::vector<std::string> out;
    if (cfg.iterations < 0) out.push_back("iterations: must be nonnegative");
    const auto& lr = cfg.lr;
    for (double v : {lr.position, lr.scale, lr.rotation, lr.opacity, lr.sh0, lr.sh_rest})
        if (!(v > 0)) {
            out.push_back("learning rates: must be positive");
            break;
        }
    if (!(lr.position_final > 0)) out.push_back("learning rates: position_final must be positive");
    if (cfg.lambda_ms < 0 || cfg.lambda_rgb < 0) out.push_back("lambda: weights must be nonnegative");
    if (cfg.loss_mode == LossMode::Dual && !(cfg.lambda_ms + cfg.lambda_rgb > 0))
        out.push_back("lambda: lambda_ms + lambda_rgb must be positive in dual mode");
    if (cfg.dssim_weight < 0 || cfg.dssim_weight > 1) out.push_back("dssim_weight: must lie in [0, 1]");
    const auto& d = cfg.densify;
    if (d.enabled) {
        if (d.interval <= 0) out.push_back("densify.interval: must be positive");
        if (!(d.grad_threshold > 0)) out.push_back("densify.grad_threshold: must be positive");
        if (!(d.opacity_prune_threshold > 0 && d.opacity_prune_threshold < 1))
            out.push_back("densify.opacity_prune_threshold: must lie in (0, 1)");
    }
    if (!(d.start_iter < d.stop_iter)) out.push_back("densify: start_iter must be below stop_iter");
    return out;
}

template <typename T>
double camera_extent(const std::vector<View<T>>& views) {
    if (views.empty()) return 1.0;
    std::array<double, 3> mean{};
    std::vector<std::array<double, 3>> centers;
    for (const auto& v : views) {
        const auto c = v.camera.center();
        centers.push_back({static_cast<double>(c[0]), static_cast<double>(c[1]), static_cast<double>(c[2])});
        for (int k = 0; k < 3; ++k) mean[static_cast<std::size_t>(k)] += centers.back()[static_cast<std::size_t>(k)];
    }
    for (auto& m : mean) m /= static_cast<double>(views.size());
    double radius = 0;
    for (const auto& c : centers)
        radius = std::max(radius, std::sqrt((c[0] - mean[0]) * (c[0] - mean[0]) + (c[1] - mean[1]) * (c[1] - mean[1]) +
                                            (c[2] - mean[2]) * (c[2] - mean[2])));
    return std::max(1.0, 1.1 * radius);
}

std::string to_string(ConversionStage s) { return s == ConversionStage::GaussianLevel ? "gaussian" : "pixel"; }

std::string to_string(LossMode m) {
    switch (m) {
        case LossMode::RgbOnly: return "rgb";
        case LossMode::MsOnly: return "ms";
        case LossMode::Dual: return "dual";
    }
    return "dual";
}

ConversionStage parse_stage(const std::string& s) {
    if (s == "gaussian") return ConversionStage::GaussianLevel;
    if (s == "pixel") return ConversionStage::PixelLevel;
    throw ConfigError("unknown conversion stage '" + s + "' (expected gaussian|pixel)");
}

LossMode parse_loss_mode(const std::string& s) {
    if (s == "rgb") return LossMode::RgbOnly;
    if (s == "ms") return LossMode::MsOnly;
    if (s == "dual") return LossMode::Dual;
    throw ConfigError("unknown loss mode '" + s + "' (expected rgb|ms|dual)");
}

template double camera_extent(const std::vector<View<float>>&);
template double camera_extent(const std::vector<View<double>>&);
template struct GaussianCloud<float>;
template struct GaussianCloud<double>;
template GaussianCloud<double> GaussianCloud<float>::cast<double>() const;
template GaussianCloud<float> GaussianCloud<double>::cast<float>() const;
template GaussianCloud<float> GaussianCloud<float>::cast<float>() const;
template GaussianCloud<double> GaussianCloud<double>::cast<double>() const;
template std::vector<std::string> validate_cloud(const GaussianCloud<float>&);
template std::vector<std::string> validate_cloud(const GaussianCloud<double>&);
template struct Camera<float>;
template struct Camera<double>;
template Camera<double> Camera<float>::cast<double>() const;
template Camera<float> Camera<double>::cast<float>() const;
template Camera<float> Camera<float>::cast<float>() const;
template Camera<double> Camera<double>::cast<double>() const;
template std::vector<std::string> validate_camera(const Camera<float>&);
template std::vector<std::string> validate_camera(const Camera<double>&);

}  // namespace msgs

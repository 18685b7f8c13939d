#pragma once

// Shared fixtures for the unit tests and the acceptance runner: random
// clouds and cameras, and a central-difference gradient checker for the
// full training objective.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "msgs/colorpipe.hpp"
#include "msgs/core.hpp"
#include "msgs/losses.hpp"
#include "msgs/rasterizer.hpp"
#include "msgs/trainer.hpp"

namespace msgs::test {

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double normal(std::mt19937_64& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

/// Camera at the origin looking down +z, focal length equal to the width.
template <typename T>
Camera<T> front_camera(int width, int height, double focal = 0) {
    Camera<T> cam;
    cam.width = width;
    cam.height = height;
    cam.fx = cam.fy = static_cast<T>(focal > 0 ? focal : width);
    cam.cx = static_cast<T>((width - 1) / 2.0);
    cam.cy = static_cast<T>((height - 1) / 2.0);
    return cam;
}

/// Random strictly increasing basis inside [400, 820] nm.
inline SpectralBasis random_basis(std::mt19937_64& rng, int bands) {
    std::vector<double> wl(static_cast<std::size_t>(bands));
    const double step = 420.0 / bands;
    for (int b = 0; b < bands; ++b) wl[static_cast<std::size_t>(b)] = 400.0 + step * (b + uniform(rng, 0.1, 0.9));
    return SpectralBasis(std::move(wl));
}

struct CloudShape {
    double depth_lo = 2.5, depth_hi = 4.0;
    double spread = 0.35;      ///< lateral extent as a fraction of depth
    double scale_lo = 0.08, scale_hi = 0.2;  ///< world units, relative to depth 1
    double opacity_lo = 0.35, opacity_hi = 0.85;
    double sh0_lo = -0.4, sh0_hi = 1.2;
    double sh_rest = 0.08;
};

/// Random cloud in front of front_camera(); decoded radiance stays well
/// above the zero clamp and alpha below alpha_max.
template <typename T>
GaussianCloud<T> random_cloud(std::mt19937_64& rng, std::size_t n, const SpectralBasis& basis, int degree,
                              const CloudShape& shape = {}) {
    GaussianCloud<T> c(basis, degree, n);
    const int k = c.coeffs_per_band();
    for (std::size_t i = 0; i < n; ++i) {
        const double z = uniform(rng, shape.depth_lo, shape.depth_hi);
        c.positions[3 * i + 0] = static_cast<T>(uniform(rng, -shape.spread, shape.spread) * z);
        c.positions[3 * i + 1] = static_cast<T>(uniform(rng, -shape.spread, shape.spread) * z);
        c.positions[3 * i + 2] = static_cast<T>(z);
        for (int a = 0; a < 3; ++a)
            c.log_scales[3 * i + static_cast<std::size_t>(a)] =
                static_cast<T>(std::log(uniform(rng, shape.scale_lo, shape.scale_hi) * z));
        double q[4], norm = 0;
        for (double& v : q) {
            v = normal(rng);
            norm += v * v;
        }
        for (int a = 0; a < 4; ++a) c.rotations[4 * i + static_cast<std::size_t>(a)] = static_cast<T>(q[a] / std::sqrt(norm));
        c.opacity_logits[i] = static_cast<T>(logit(uniform(rng, shape.opacity_lo, shape.opacity_hi)));
        auto sh = c.sh_of(i);
        for (int b = 0; b < basis.band_count(); ++b)
            for (int j = 0; j < k; ++j)
                sh[static_cast<std::size_t>(b * k + j)] =
                    static_cast<T>(j == 0 ? uniform(rng, shape.sh0_lo, shape.sh0_hi) : shape.sh_rest * normal(rng));
    }
    return c;
}

template <typename T>
SpectralImage<T> random_cube(std::mt19937_64& rng, int h, int w, const SpectralBasis& basis, double lo = 0,
                             double hi = 1) {
    SpectralImage<T> im(h, w, basis);
    for (auto& v : im.data) v = static_cast<T>(uniform(rng, lo, hi));
    return im;
}

template <typename T>
RgbImage<T> random_rgb(std::mt19937_64& rng, int h, int w, ColorSpace cs, double lo = 0, double hi = 1) {
    RgbImage<T> im(h, w, cs);
    for (auto& v : im.data) v = static_cast<T>(uniform(rng, lo, hi));
    return im;
}

/// Settings without discontinuities in the neighbourhood of typical
/// parameters: no early termination and a negligible skip threshold.
inline RenderSettings smooth_settings() {
    RenderSettings s;
    s.t_min = 0;
    s.alpha_min = 1e-12;
    return s;
}

inline double relative_error(double a, double b) {
    const double den = std::max(std::abs(a), std::abs(b));
    return den == 0 ? 0 : std::abs(a - b) / den;
}

/// Roundoff carried by a central difference of an objective of magnitude
/// `f` evaluated in double precision.
inline double fd_noise(double f, double h) { return 16 * 2.220446049250313e-16 * std::max(std::abs(f), 1e-3) / h; }

/// Relative agreement, or agreement within the difference quotient's own roundoff.
inline bool fd_agrees(double analytic, double fd, double noise, double tolerance = 1e-4) {
    return std::abs(analytic - fd) <= tolerance * std::max(std::abs(analytic), std::abs(fd)) + noise;
}

struct GroupCheck {
    std::string group;
    int checked = 0;
    int strict_failed = 0;  ///< outside the tolerance of the step-h central difference
    int failed = 0;         ///< outside the tolerance of the refined reference as well
    int kinks = 0;          ///< at a non-differentiable point, analytic matches one side
    double worst = 0;       ///< largest relative error against the step-h central difference
    double worst_refined = 0;  ///< largest relative error among re-measured entries
};

struct GradCheckOptions {
    double h = 1e-5;
    double tolerance = 1e-4;
    double magnitude_floor = 1e-8;  ///< entries with smaller |grad| are skipped
    /// Step of the fourth-order stencil used to re-measure entries whose
    /// step-h difference is dominated by roundoff.
    double refine_h = 1e-3;
    /// Step of the local differences used to recognise a kink of the loss
    /// (an L1 residual crossing zero) inside the stencil.
    double local_h = 1e-7;
    std::size_t max_entries_per_group = 0;  ///< 0 checks every entry
    bool verbose = false;
};

/// Compares loss_and_gradients() against central differences of l_total
/// for every parameter group. An entry outside the tolerance is measured
/// again with a fourth-order stencil at a larger step. If that disagrees
/// too, the entry counts as a kink when the derivative jumps between x-h
/// and x+h while the analytic value matches the local derivative at x;
/// otherwise it fails.
inline std::vector<GroupCheck> check_gradients(const GaussianCloud<double>& cloud, const TrainView<double>& view,
                                               const TrainConfig& cfg, const TrainContext<double>& ctx,
                                               std::mt19937_64& rng, const GradCheckOptions& opt = {}) {
    const auto full = loss_and_gradients(cloud, view, cfg, ctx, true);
    const auto& analytic = full.grad;
    GaussianCloud<double> probe = cloud;
    auto loss_at = [&] { return loss_and_gradients(probe, view, cfg, ctx, false).loss.l_total; };

    struct Group {
        const char* name;
        std::vector<double> GaussianCloud<double>::*field;
        const std::vector<double>* grad;
    };
    const Group groups[] = {
        {"positions", &GaussianCloud<double>::positions, &analytic.positions},
        {"log_scales", &GaussianCloud<double>::log_scales, &analytic.log_scales},
        {"rotations", &GaussianCloud<double>::rotations, &analytic.rotations},
        {"opacity_logits", &GaussianCloud<double>::opacity_logits, &analytic.opacity_logits},
        {"sh_coeffs", &GaussianCloud<double>::sh_coeffs, &analytic.sh_coeffs},
    };
    std::vector<GroupCheck> out;
    for (const auto& g : groups) {
        GroupCheck gc{g.name};
        auto& values = probe.*g.field;
        auto loss_with = [&](std::size_t i, double x) {
            const double x0 = values[i];
            values[i] = x;
            const double l = loss_at();
            values[i] = x0;
            return l;
        };
        std::vector<std::size_t> idx(values.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        if (opt.max_entries_per_group && idx.size() > opt.max_entries_per_group) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(opt.max_entries_per_group);
        }
        for (std::size_t i : idx) {
            const double a = (*g.grad)[i];
            if (std::abs(a) <= opt.magnitude_floor) continue;
            const double x0 = values[i], h = opt.h, r = opt.refine_h;
            const double fd = (loss_with(i, x0 + h) - loss_with(i, x0 - h)) / (2 * h);
            const double err = relative_error(a, fd);
            ++gc.checked;
            gc.worst = std::max(gc.worst, err);
            if (err <= opt.tolerance) continue;
            ++gc.strict_failed;
            const double fd4 = (-loss_with(i, x0 + 2 * r) + 8 * loss_with(i, x0 + r) - 8 * loss_with(i, x0 - r) +
                                loss_with(i, x0 - 2 * r)) /
                               (12 * r);
            const double err4 = relative_error(a, fd4);
            if (err4 <= opt.tolerance) {
                gc.worst_refined = std::max(gc.worst_refined, err4);
                continue;
            }
            const double s = opt.local_h;
            auto local = [&](double x) { return (loss_with(i, x + s) - loss_with(i, x - s)) / (2 * s); };
            const double at = local(x0), below = local(x0 - h), above = local(x0 + h);
            if (relative_error(a, at) <= opt.tolerance && relative_error(below, above) > opt.tolerance) {
                ++gc.kinks;
                continue;
            }
            gc.worst_refined = std::max(gc.worst_refined, err4);
            ++gc.failed;
            if (opt.verbose)
                std::printf("  %s[%zu]: analytic %.9g central %.9g fourth-order %.9g\n", g.name, i, a, fd,
                            fd4);
        }
        out.push_back(gc);
    }
    return out;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("msgs_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace msgs::test

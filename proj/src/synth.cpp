#include "msgs/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "msgs/sh.hpp"

namespace msgs {

SpectralBasis sensor16_basis() {
    return SpectralBasis({415, 431, 450, 469, 488, 507, 526, 545, 564, 583, 602, 621, 640, 660, 680, 808});
}

SpectralBasis default_basis(int n_bands) {
    if (n_bands <= 0) throw ConfigError("n_bands must be positive");
    if (n_bands == 16) return sensor16_basis();
    if (n_bands == 8) return SpectralBasis::uniform(400, 750, 8);
    return SpectralBasis::uniform(415, 808, n_bands);
}

namespace {

void validate_synth(const SynthConfig& c) {
    if (c.n_gaussians <= 0) throw ConfigError("synth: n_gaussians must be positive");
    if (c.n_views <= 0) throw ConfigError("synth: n_views must be positive");
    if (c.resolution <= 0) throw ConfigError("synth: resolution must be positive");
    if (c.sh_degree < 0 || c.sh_degree > kMaxShDegree) throw ConfigError("synth: sh_degree must be in [0, 3]");
    if (c.n_init_points <= 0) throw ConfigError("synth: n_init_points must be positive");
    if (c.test_every < 0) throw ConfigError("synth: test_every must be nonnegative");
    if (!(c.camera_distance > c.object_radius)) throw ConfigError("synth: cameras must lie outside the object");
    if (!(c.peak_luminance > 0)) throw ConfigError("synth: peak_luminance must be positive");
}

/// Smooth positive spectrum: baseline plus one or two Gaussian bumps.
std::vector<double> random_spectrum(const SpectralBasis& basis, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double lo = basis[0], hi = basis[basis.band_count() - 1];
    const double base = 0.05 + 0.25 * u(rng);
    const int bumps = 1 + static_cast<int>(u(rng) < 0.5);
    std::vector<double> s(static_cast<std::size_t>(basis.band_count()), base);
    for (int k = 0; k < bumps; ++k) {
        const double mu = lo + (hi - lo) * u(rng);
        const double width = 30.0 + 90.0 * u(rng);
        const double amp = 0.3 + 0.7 * u(rng);
        for (int b = 0; b < basis.band_count(); ++b) {
            const double d = (basis[b] - mu) / width;
            s[static_cast<std::size_t>(b)] += amp * std::exp(-0.5 * d * d);
        }
    }
    return s;
}

}  // namespace

template <typename T>
SynthScene<T> make_synthetic_scene(const SynthConfig& cfg, const SpectralBasis& basis, const ColorPipeConfig& color,
                                   const RenderSettings& render) {
    validate_synth(cfg);
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);

    ColorPipeConfig linear_cfg = color;
    linear_cfg.apply_gamma = false;
    const ColorPipe pipe(basis, color);
    const ColorPipe linear_pipe(basis, linear_cfg);
    double y_sum = 0;
    for (double v : pipe.cmf().y) y_sum += v;

    const int bands = basis.band_count();
    const std::size_t n = static_cast<std::size_t>(cfg.n_gaussians);
    SynthScene<T> out;
    out.ground_truth = GaussianCloud<T>(basis, cfg.sh_degree, n);
    auto& gt = out.ground_truth;
    const std::size_t k = static_cast<std::size_t>(gt.coeffs_per_band());
    std::vector<std::vector<double>> spectra(n);

    for (std::size_t i = 0; i < n; ++i) {
        // uniform in the ball
        std::array<double, 3> d{normal(rng), normal(rng), normal(rng)};
        const double len = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
        const double r = cfg.object_radius * std::cbrt(u(rng));
        for (int c = 0; c < 3; ++c) {
            gt.positions[3 * i + static_cast<std::size_t>(c)] = static_cast<T>(d[static_cast<std::size_t>(c)] / len * r);
            gt.log_scales[3 * i + static_cast<std::size_t>(c)] =
                static_cast<T>(std::log(cfg.object_radius * (0.07 + 0.13 * u(rng))));
        }
        std::array<double, 4> q{normal(rng), normal(rng), normal(rng), normal(rng)};
        const double qn = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
        for (int c = 0; c < 4; ++c) gt.rotations[4 * i + static_cast<std::size_t>(c)] = static_cast<T>(q[static_cast<std::size_t>(c)] / qn);
        gt.opacity_logits[i] = static_cast<T>(logit(0.55 + 0.4 * u(rng)));

        auto s = random_spectrum(basis, rng);
        double y = 0;
        for (int b = 0; b < bands; ++b) y += s[static_cast<std::size_t>(b)] * pipe.cmf().y[static_cast<std::size_t>(b)];
        const double target = cfg.peak_luminance * (0.25 + 0.75 * u(rng));
        double scale = y > 1e-12 ? target / y : 1.0;
        // keep each Gaussian's linear RGB and band values within [0, 1)
        std::vector<double> scaled(s);
        for (auto& v : scaled) v *= scale;
        const auto lin = linear_pipe.spectrum_to_rgb<double>(scaled);
        const double peak = std::max({lin[0], lin[1], lin[2], *std::max_element(scaled.begin(), scaled.end())});
        if (peak > 0.95) scale *= 0.95 / peak;
        for (auto& v : s) v *= scale;
        spectra[i] = s;

        auto sh = gt.sh_of(i);
        for (int b = 0; b < bands; ++b) {
            const double sb = s[static_cast<std::size_t>(b)];
            sh[static_cast<std::size_t>(b) * k] = static_cast<T>((sb - sh::kDecodeOffset) / sh::kC0);
            for (std::size_t c = 1; c < k; ++c)
                sh[static_cast<std::size_t>(b) * k + c] = static_cast<T>(cfg.sh_rest_amplitude * sb * normal(rng));
        }
    }

    auto& scene = out.scene;
    scene.basis = basis;
    const T focal = static_cast<T>(cfg.focal_factor * cfg.resolution);
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (int v = 0; v < cfg.n_views; ++v) {
        // Fibonacci sphere, poles excluded
        const double zc = 1.0 - 2.0 * (v + 0.5) / cfg.n_views;
        const double rad = std::sqrt(std::max(0.0, 1.0 - zc * zc));
        const double phi = golden * v;
        const std::array<T, 3> eye{static_cast<T>(cfg.camera_distance * rad * std::cos(phi)),
                                   static_cast<T>(cfg.camera_distance * rad * std::sin(phi)),
                                   static_cast<T>(cfg.camera_distance * zc)};
        const std::array<T, 3> up = std::abs(zc) > 0.99 ? std::array<T, 3>{0, 1, 0} : std::array<T, 3>{0, 0, 1};
        View<T> view;
        char name[32];
        std::snprintf(name, sizeof(name), "view_%03d", v);
        view.name = name;
        view.camera = Camera<T>::look_at(cfg.resolution, cfg.resolution, focal, eye, {0, 0, 0}, up);
        view.spectral = rasterize(gt, view.camera, render).image;
        auto rgb = convert_pixel_level(view.spectral, pipe);
        clamp_for_output(rgb);
        view.rgb = std::move(rgb);
        view.test = cfg.test_every > 0 && v % cfg.test_every == cfg.test_every - 1;
        scene.views.push_back(std::move(view));
    }

    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (int p = 0; p < cfg.n_init_points; ++p) {
        const std::size_t j = pick(rng);
        const T* q = gt.rotations.data() + 4 * j;
        const double w = q[0], x = q[1], y = q[2], z = q[3];
        const double rm[3][3] = {{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
                                 {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
                                 {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}};
        std::array<double, 3> local{};
        for (int c = 0; c < 3; ++c)
            local[static_cast<std::size_t>(c)] =
                normal(rng) * std::exp(static_cast<double>(gt.log_scales[3 * j + static_cast<std::size_t>(c)]));
        PointSample ps;
        for (int a = 0; a < 3; ++a)
            ps.position[static_cast<std::size_t>(a)] = static_cast<double>(gt.positions[3 * j + static_cast<std::size_t>(a)]) +
                                                       rm[a][0] * local[0] + rm[a][1] * local[1] + rm[a][2] * local[2] +
                                                       cfg.init_jitter * normal(rng);
        ps.spectrum = spectra[j];
        for (auto& v : ps.spectrum) v = std::max(0.0, v * (1.0 + cfg.init_color_noise * normal(rng)));
        scene.points.push_back(std::move(ps));
    }
    return out;
}

template SynthScene<float> make_synthetic_scene<float>(const SynthConfig&, const SpectralBasis&,
                                                       const ColorPipeConfig&, const RenderSettings&);
template SynthScene<double> make_synthetic_scene<double>(const SynthConfig&, const SpectralBasis&,
                                                         const ColorPipeConfig&, const RenderSettings&);

}  // namespace msgs

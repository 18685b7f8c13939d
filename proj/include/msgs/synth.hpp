#pragma once

// Synthetic scenes whose ground truth comes from the library's own renderer.

#include <cstdint>

#include "msgs/colorpipe.hpp"
#include "msgs/core.hpp"
#include "msgs/rasterizer.hpp"

namespace msgs {

/// 16-band sensor layout over 415-808 nm (second band 431 nm, 680 nm and
/// 808 nm present so the visible / near-infrared masks are expressible).
SpectralBasis sensor16_basis();

/// sensor16_basis() for 16 bands, 400-750 nm uniform for 8, else uniform 415-808 nm.
SpectralBasis default_basis(int n_bands);

struct SynthConfig {
    std::uint64_t seed = 7;
    int n_gaussians = 100;
    int n_bands = 16;
    int n_views = 12;
    int resolution = 64;
    int sh_degree = 3;
    int n_init_points = 200;
    double init_jitter = 0.03;       ///< std-dev of the init position noise (world units)
    double init_color_noise = 0.15;  ///< relative std-dev of the init spectrum noise
    double object_radius = 0.6;
    double camera_distance = 3.0;
    double focal_factor = 1.4;  ///< focal length in units of the resolution
    int test_every = 4;         ///< every k-th view is held out
    /// Peak luminance Y of a Gaussian's spectrum through the pipe; keeps
    /// the plain-sum tristimulus values inside the display range.
    double peak_luminance = 0.85;
    double sh_rest_amplitude = 0.03;
};

template <typename T>
struct SynthScene {
    Scene<T> scene;  ///< views (with GT spectral + RGB) and init points
    GaussianCloud<T> ground_truth;
};

/// Random ground-truth cloud, cameras on a sphere, GT images by the forward
/// renderer, GT RGB by the pixel-level pipe (clamped), jittered init points.
template <typename T>
SynthScene<T> make_synthetic_scene(const SynthConfig& cfg, const SpectralBasis& basis,
                                   const ColorPipeConfig& color = {}, const RenderSettings& render = {});

template <typename T>
SynthScene<T> make_synthetic_scene(const SynthConfig& cfg) {
    return make_synthetic_scene<T>(cfg, default_basis(cfg.n_bands));
}

}  // namespace msgs

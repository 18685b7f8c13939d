#pragma once

// Differentiable splatting of Gaussian clouds into N-channel images.
//
// Pipeline: project (EWA) -> shade (SH decode) -> composite (front-to-back
// alpha blending over 16x16 tiles, OpenMP-parallel over tiles). The backward
// pass replays the per-pixel contributor lists recorded by the forward pass.
//
// composite_naive() is the serial per-pixel reference with no tiling and no
// bounding-radius culling; it is kept for testing and benchmarking.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "msgs/core.hpp"

namespace msgs {

struct RenderSettings {
    double alpha_min = 1.0 / 255.0;  ///< contributors with alpha <= this are skipped
    double alpha_max = 0.99;
    double t_min = 1e-4;             ///< stop compositing once transmittance drops below
    double blur = 0.3;               ///< px^2 added to the 2D covariance diagonal
    int tile_size = 16;
    double guard_band = 0.3;         ///< fraction of the image size tolerated outside the frame
    std::vector<double> background;  ///< per channel; empty means zero
};

template <typename T>
struct ProjectedGaussian {
    std::array<T, 2> mean2d{};
    std::array<T, 3> cov2d{};  ///< (xx, xy, yy), blur included
    std::array<T, 3> conic{};  ///< inverse of cov2d, same packing
    T depth = 0;
    T radius_px = 0;
    T opacity = 0;
    bool visible = false;
};

/// Per-Gaussian projection results plus the intermediates needed by the
/// backward pass.
template <typename T>
struct Projection {
    std::vector<ProjectedGaussian<T>> gaussians;
    std::vector<std::array<T, 3>> cam_points;
    std::vector<std::array<T, 3>> view_dirs;  ///< unit, camera centre -> mean
    std::vector<T> view_dist;                 ///< |mean - camera centre|
    std::vector<std::uint32_t> depth_order;   ///< visible indices, front to back

    [[nodiscard]] std::size_t size() const { return gaussians.size(); }
    [[nodiscard]] std::vector<bool> cull_mask() const;  ///< true where culled
};

template <typename T>
Projection<T> project(const GaussianCloud<T>& cloud, const Camera<T>& camera, const RenderSettings& settings = {});

/// Decoded N-band radiance per Gaussian ([gaussian][band]); also returns the
/// pre-clamp values when `pre_clamp` is non-null.
template <typename T>
std::vector<T> shade(const GaussianCloud<T>& cloud, const Projection<T>& proj, std::vector<T>* pre_clamp = nullptr);

template <typename T>
struct Contributor {
    std::uint32_t gaussian = 0;
    std::uint32_t slot = 0;  ///< position in the owning tile's Gaussian list
    T alpha = 0;
    T transmittance = 0;  ///< before this contributor
};

/// Per-pixel contributor records saved by composite().
template <typename T>
struct CompositeAux {
    int width = 0;
    int height = 0;
    int channels = 0;
    int tile_size = 16;
    int tiles_x = 0;
    int tiles_y = 0;
    std::vector<std::vector<std::uint32_t>> tile_gaussians;  ///< depth ordered
    std::vector<std::vector<Contributor<T>>> tile_records;
    std::vector<std::vector<std::uint32_t>> tile_offsets;  ///< per pixel in tile, size pixels+1
    std::vector<T> final_transmittance;                    ///< per pixel
    std::vector<T> background;                             ///< per channel

    /// Contributors of pixel (x, y) in compositing order.
    [[nodiscard]] std::span<const Contributor<T>> contributors(int x, int y) const;
};

/// Alpha-composites `colors` ([gaussian][channel]) into an H x W x C image.
template <typename T>
std::vector<T> composite(const Projection<T>& proj, std::span<const T> colors, int channels, const Camera<T>& camera,
                         const RenderSettings& settings, CompositeAux<T>* aux = nullptr);

/// Serial reference: every visible Gaussian is tested at every pixel.
template <typename T>
std::vector<T> composite_naive(const Projection<T>& proj, std::span<const T> colors, int channels,
                               const Camera<T>& camera, const RenderSettings& settings,
                               std::vector<T>* final_transmittance = nullptr);

/// Gradients of a scalar loss w.r.t. the composite() inputs.
template <typename T>
struct CompositeGrad {
    std::vector<T> colors;   ///< [gaussian][channel]
    std::vector<T> mean2d;   ///< [gaussian][2]
    std::vector<T> conic;    ///< [gaussian][3] (xx, xy, yy) with xy counted once
    std::vector<T> opacity;  ///< [gaussian], w.r.t. sigmoid output
};

template <typename T>
CompositeGrad<T> composite_backward(const Projection<T>& proj, std::span<const T> colors, int channels,
                                    const CompositeAux<T>& aux, const RenderSettings& settings,
                                    std::span<const T> grad_image);

/// Gradients w.r.t. every GaussianCloud parameter array (same layouts).
template <typename T>
struct ParamGradients {
    std::vector<T> positions;
    std::vector<T> log_scales;
    std::vector<T> rotations;
    std::vector<T> opacity_logits;
    std::vector<T> sh_coeffs;
    std::vector<T> mean2d;  ///< screen-space mean gradient, used for densification

    ParamGradients() = default;
    explicit ParamGradients(const GaussianCloud<T>& cloud);
    ParamGradients& operator+=(const ParamGradients& o);
    void scale(T s);
};

/// Chains mean2d / conic / opacity gradients back through the EWA
/// projection into positions, log_scales, rotations and opacity_logits.
template <typename T>
void project_backward(const GaussianCloud<T>& cloud, const Camera<T>& camera, const Projection<T>& proj,
                      const CompositeGrad<T>& grad, ParamGradients<T>& out);

/// Backprop through SH decoding: radiance gradients -> sh_coeffs, positions.
template <typename T>
void shade_backward(const GaussianCloud<T>& cloud, const Projection<T>& proj, std::span<const T> pre_clamp,
                    std::span<const T> grad_radiance, ParamGradients<T>& out);

/// Everything rasterize_backward() needs from the matching forward call.
template <typename T>
struct RenderAux {
    Projection<T> projection;
    std::vector<T> radiance;   ///< decoded, [gaussian][band]
    std::vector<T> pre_clamp;  ///< decode before the zero clamp
    CompositeAux<T> composite;
    std::uint64_t fingerprint = 0;
};

/// Fingerprint of (cloud, camera) used to detect stale aux.
template <typename T>
std::uint64_t render_fingerprint(const GaussianCloud<T>& cloud, const Camera<T>& camera);

template <typename T>
struct RenderResult {
    SpectralImage<T> image;
    RenderAux<T> aux;
};

template <typename T>
RenderResult<T> rasterize(const GaussianCloud<T>& cloud, const Camera<T>& camera, const RenderSettings& settings = {});

/// Single-threaded naive spectral render of the same function (no tiling).
template <typename T>
SpectralImage<T> rasterize_naive(const GaussianCloud<T>& cloud, const Camera<T>& camera,
                                 const RenderSettings& settings = {});

/// Gradients of sum(grad_image * image) w.r.t. every cloud parameter.
/// Throws ContractViolation when `aux` was produced for other inputs.
template <typename T>
ParamGradients<T> rasterize_backward(const GaussianCloud<T>& cloud, const Camera<T>& camera, const RenderAux<T>& aux,
                                     std::span<const T> grad_image, const RenderSettings& settings = {});

/// OpenMP thread count used by all parallel kernels (0 = runtime default).
void set_num_threads(int n);
int num_threads();

}  // namespace msgs

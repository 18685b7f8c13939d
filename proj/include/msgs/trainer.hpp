#pragma once

// Optimization loop: initialization, per-view loss + backprop through the
// selected conversion stage, Adam updates and simplified densify / prune.

#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "msgs/colorpipe.hpp"
#include "msgs/core.hpp"
#include "msgs/losses.hpp"
#include "msgs/rasterizer.hpp"

namespace msgs {

/// Adam moments for every parameter array, mirroring GaussianCloud layouts.
template <typename T>
struct OptimizerState {
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-15;

    struct Moments {
        std::vector<T> m, v;
        void resize(std::size_t n) {
            m.assign(n, T(0));
            v.assign(n, T(0));
        }
    };

    Moments positions, log_scales, rotations, opacity_logits, sh_coeffs;
    long step = 0;

    OptimizerState() = default;
    explicit OptimizerState(const GaussianCloud<T>& cloud);

    /// Keeps moment rows where keep[i]; then appends `added` zeroed rows.
    void filter_and_grow(const GaussianCloud<T>& cloud_before, const std::vector<bool>& keep, std::size_t added);
    /// Zeroes the opacity moments (used by the opacity reset).
    void reset_opacity();
};

/// Learning rates of one step; position rate already decayed and scaled.
struct StepRates {
    double position, scale, rotation, opacity, sh0, sh_rest;
};

StepRates rates_at(const TrainConfig& cfg, int iteration, double spatial_scale);

/// One bias-corrected Adam update of every parameter; renormalizes rotations.
template <typename T>
void adam_step(GaussianCloud<T>& cloud, OptimizerState<T>& state, const ParamGradients<T>& grad,
               const StepRates& rates);

/// Base spectra are decoded-radiance targets in [0, 1].
template <typename T>
GaussianCloud<T> init_from_points(std::span<const PointSample> points, const SpectralBasis& basis, int sh_degree);

/// Mean distance to the (up to) three nearest neighbours of each point.
std::vector<double> mean_neighbor_distance(std::span<const PointSample> points, int k = 3);

/// Ground truth and camera of one training step.
template <typename T>
struct TrainView {
    const Camera<T>* camera = nullptr;
    const SpectralImage<T>* gt_ms = nullptr;
    const RgbImage<T>* gt_rgb = nullptr;
};

/// Settings for compositing 3-channel colours: a spectral background is
/// converted through `pipe`.
RenderSettings rgb_render_settings(const RenderSettings& base, const ColorPipe& pipe);

/// Shared per-run context.
template <typename T>
struct TrainContext {
    ColorPipe pipe;
    RenderSettings render;
};

template <typename T>
struct LossAndGrad {
    LossBreakdown loss;
    ParamGradients<T> grad;
    std::vector<bool> visible;
};

/// Forward (and, with `want_grad`, backward) pass of the configured objective.
template <typename T>
LossAndGrad<T> loss_and_gradients(const GaussianCloud<T>& cloud, const TrainView<T>& view, const TrainConfig& cfg,
                                  const TrainContext<T>& ctx, bool want_grad = true);

/// Screen-space mean-gradient norms (NDC units) feeding densification.
struct DensifyStats {
    std::vector<double> grad_norm_sum;
    std::vector<int> visible_count;

    void reset(std::size_t n) {
        grad_norm_sum.assign(n, 0.0);
        visible_count.assign(n, 0);
    }
};

/// One optimization step on one view: loss, backprop, Adam, renormalize.
template <typename T>
LossBreakdown train_step(GaussianCloud<T>& cloud, OptimizerState<T>& state, const TrainView<T>& view,
                         const TrainConfig& cfg, const TrainContext<T>& ctx, int iteration,
                         DensifyStats* stats = nullptr, double spatial_scale = 1.0);

/// Clones / splits high-gradient Gaussians and prunes transparent ones.
/// Throws Error when pruning would leave the cloud empty.
template <typename T>
void densify_and_prune(GaussianCloud<T>& cloud, OptimizerState<T>& state, const DensifyStats& stats,
                       const DensifyConfig& cfg, std::mt19937_64& rng);

struct EvalMetrics {
    int iteration = 0;
    std::vector<double> band_psnr;  ///< per band, averaged over views
    double spectral_psnr = 0;       ///< whole-cube PSNR averaged over views
    double spectral_ssim = 0;
    double rgb_psnr = 0;
    double rgb_ssim = 0;
};

struct TrainReport {
    std::vector<LossBreakdown> history;
    std::vector<EvalMetrics> evals;
    double wall_clock_seconds = 0;
    std::size_t final_count = 0;
};

/// Metrics of `cloud` against views (RGB rendered through `stage`).
template <typename T>
EvalMetrics evaluate(const GaussianCloud<T>& cloud, std::span<const View<T>> views, ConversionStage stage,
                     const TrainContext<T>& ctx);

/// Optional observers of a training run.
template <typename T>
struct TrainHooks {
    std::function<void(int iteration, const LossBreakdown&, std::size_t count)> on_iteration;
    std::function<void(int iteration, const GaussianCloud<T>&)> on_checkpoint;
    std::function<void(const EvalMetrics&)> on_eval;
};

/// Ground-truth RGB for a view: its stored image, or the pixel-level
/// conversion of its spectral cube.
template <typename T>
RgbImage<T> ground_truth_rgb(const View<T>& view, const ColorPipe& pipe);

/// ColorPipeConfig with the gamma / white-balance switches of `cfg` applied.
ColorPipeConfig effective_color_config(const TrainConfig& cfg, ColorPipeConfig base);

/// Full run. Initializes from scene.cloud if present, else scene.points.
template <typename T>
std::pair<GaussianCloud<T>, TrainReport> train(const Scene<T>& scene, const TrainConfig& cfg,
                                               const ColorPipeConfig& color = {}, const RenderSettings& render = {},
                                               int sh_degree = 3, const TrainHooks<T>& hooks = {});

}  // namespace msgs

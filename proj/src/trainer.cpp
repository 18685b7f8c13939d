#include "msgs/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "msgs/sh.hpp"

namespace msgs {

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <typename T>
OptimizerState<T>::OptimizerState(const GaussianCloud<T>& cloud) {
    positions.resize(cloud.positions.size());
    log_scales.resize(cloud.log_scales.size());
    rotations.resize(cloud.rotations.size());
    opacity_logits.resize(cloud.opacity_logits.size());
    sh_coeffs.resize(cloud.sh_coeffs.size());
}

namespace {

template <typename T>
void filter_grow(std::vector<T>& v, std::size_t stride, const std::vector<bool>& keep, std::size_t added) {
    std::size_t out = 0;
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (!keep[i]) continue;
        for (std::size_t k = 0; k < stride; ++k) v[out * stride + k] = v[i * stride + k];
        ++out;
    }
    v.resize(out * stride);
    v.resize((out + added) * stride, T(0));
}

}  // namespace

template <typename T>
void OptimizerState<T>::filter_and_grow(const GaussianCloud<T>& before, const std::vector<bool>& keep, std::size_t added) {
    const std::size_t sh = before.sh_stride();
    for (auto [mom, stride] : {std::pair{&positions, std::size_t{3}}, std::pair{&log_scales, std::size_t{3}},
                               std::pair{&rotations, std::size_t{4}}, std::pair{&opacity_logits, std::size_t{1}},
                               std::pair{&sh_coeffs, sh}}) {
        filter_grow(mom->m, stride, keep, added);
        filter_grow(mom->v, stride, keep, added);
    }
}

template <typename T>
void OptimizerState<T>::reset_opacity() {
    opacity_logits.resize(opacity_logits.m.size());
}

StepRates rates_at(const TrainConfig& cfg, int iteration, double spatial_scale) {
    const double t = cfg.iterations > 0 ? std::clamp(static_cast<double>(iteration) / cfg.iterations, 0.0, 1.0) : 0.0;
    const double pos = std::exp((1 - t) * std::log(cfg.lr.position) + t * std::log(cfg.lr.position_final));
    return {pos * spatial_scale, cfg.lr.scale, cfg.lr.rotation, cfg.lr.opacity, cfg.lr.sh0, cfg.lr.sh_rest};
}

template <typename T>
void adam_step(GaussianCloud<T>& cloud, OptimizerState<T>& state, const ParamGradients<T>& grad, const StepRates& rates) {
    using S = OptimizerState<T>;
    ++state.step;
    const double bc1 = 1.0 - std::pow(S::kBeta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(S::kBeta2, static_cast<double>(state.step));
    auto update = [&](std::vector<T>& p, typename S::Moments& mom, const std::vector<T>& g, auto lr_of) {
        if (g.size() != p.size() || mom.m.size() != p.size())
            throw ContractViolation("adam_step: parameter / gradient / moment shapes differ");
        const T b1 = static_cast<T>(S::kBeta1), b2 = static_cast<T>(S::kBeta2);
        for (std::size_t i = 0; i < p.size(); ++i) {
            mom.m[i] = b1 * mom.m[i] + (T(1) - b1) * g[i];
            mom.v[i] = b2 * mom.v[i] + (T(1) - b2) * g[i] * g[i];
            const T m_hat = mom.m[i] / static_cast<T>(bc1);
            const T v_hat = mom.v[i] / static_cast<T>(bc2);
            p[i] -= static_cast<T>(lr_of(i)) * m_hat / (std::sqrt(v_hat) + static_cast<T>(S::kEps));
        }
    };
    update(cloud.positions, state.positions, grad.positions, [&](std::size_t) { return rates.position; });
    update(cloud.log_scales, state.log_scales, grad.log_scales, [&](std::size_t) { return rates.scale; });
    update(cloud.rotations, state.rotations, grad.rotations, [&](std::size_t) { return rates.rotation; });
    update(cloud.opacity_logits, state.opacity_logits, grad.opacity_logits, [&](std::size_t) { return rates.opacity; });
    const std::size_t k = static_cast<std::size_t>(cloud.coeffs_per_band());
    update(cloud.sh_coeffs, state.sh_coeffs, grad.sh_coeffs,
           [&](std::size_t i) { return i % k == 0 ? rates.sh0 : rates.sh_rest; });
    cloud.normalize_rotations();
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

std::vector<double> mean_neighbor_distance(std::span<const PointSample> points, int k) {
    const std::size_t n = points.size();
    std::vector<double> out(n, 0.0);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        std::vector<double> d;
        d.reserve(n);
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            double s = 0;
            for (int c = 0; c < 3; ++c) {
                const double e = points[i].position[static_cast<std::size_t>(c)] - points[j].position[static_cast<std::size_t>(c)];
                s += e * e;
            }
            d.push_back(std::sqrt(s));
        }
        const std::size_t m = std::min<std::size_t>(static_cast<std::size_t>(k), d.size());
        if (m == 0) {
            out[i] = 0.01;
            continue;
        }
        std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(m), d.end());
        out[i] = std::accumulate(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(m), 0.0) / static_cast<double>(m);
    }
    return out;
}

template <typename T>
GaussianCloud<T> init_from_points(std::span<const PointSample> points, const SpectralBasis& basis, int sh_degree) {
    if (points.empty()) throw ContractViolation("init_from_points: empty point set");
    const int bands = basis.band_count();
    for (std::size_t i = 0; i < points.size(); ++i)
        if (points[i].spectrum.size() != static_cast<std::size_t>(bands))
            throw ContractViolation("init_from_points: point " + std::to_string(i) + " has " +
                                    std::to_string(points[i].spectrum.size()) + " bands, basis has " +
                                    std::to_string(bands));
    GaussianCloud<T> cloud(basis, sh_degree, points.size());
    const auto dist = mean_neighbor_distance(points);
    const T logit0 = static_cast<T>(logit(0.1));
    const std::size_t k = static_cast<std::size_t>(cloud.coeffs_per_band());
    for (std::size_t i = 0; i < points.size(); ++i) {
        for (int c = 0; c < 3; ++c) {
            cloud.positions[3 * i + static_cast<std::size_t>(c)] = static_cast<T>(points[i].position[static_cast<std::size_t>(c)]);
            cloud.log_scales[3 * i + static_cast<std::size_t>(c)] = static_cast<T>(std::log(std::max(dist[i], 1e-7)));
        }
        cloud.opacity_logits[i] = logit0;
        auto sh = cloud.sh_of(i);
        for (int b = 0; b < bands; ++b)
            sh[static_cast<std::size_t>(b) * k] =
                static_cast<T>((points[i].spectrum[static_cast<std::size_t>(b)] - sh::kDecodeOffset) / sh::kC0);
    }
    return cloud;
}

// ---------------------------------------------------------------------------
// Loss + gradients
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void add_into(std::vector<T>& a, const std::vector<T>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

}  // namespace

RenderSettings rgb_render_settings(const RenderSettings& base, const ColorPipe& pipe) {
    RenderSettings s = base;
    if (!base.background.empty()) {
        const auto rgb = pipe.spectrum_to_rgb<double>(base.background);
        s.background.assign(rgb.begin(), rgb.end());
    }
    return s;
}

template <typename T>
LossAndGrad<T> loss_and_gradients(const GaussianCloud<T>& cloud, const TrainView<T>& view, const TrainConfig& cfg,
                                  const TrainContext<T>& ctx, bool want_grad) {
    if (!view.camera) throw ContractViolation("loss_and_gradients: view has no camera");
    const bool use_ms = cfg.loss_mode != LossMode::RgbOnly;
    const bool use_rgb = cfg.loss_mode != LossMode::MsOnly;
    if (use_ms && !view.gt_ms) throw ContractViolation("train: multispectral ground truth missing for active MS loss");
    if (use_rgb && !view.gt_rgb) throw ContractViolation("train: RGB ground truth missing for active RGB loss");
    const Camera<T>& cam = *view.camera;
    const int bands = cloud.bands();

    const auto proj = project(cloud, cam, ctx.render);
    std::vector<T> pre;
    const auto radiance = shade(cloud, proj, &pre);

    LossAndGrad<T> out;
    out.visible.resize(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) out.visible[i] = proj.gaussians[i].visible;

    std::optional<ImageView<T>> gt_ms, gt_rgb;
    if (view.gt_ms) gt_ms.emplace(*view.gt_ms);
    if (view.gt_rgb) gt_rgb.emplace(*view.gt_rgb);

    CompositeGrad<T> cg;
    std::vector<T> grad_radiance;
    if (cfg.conversion_stage == ConversionStage::PixelLevel) {
        CompositeAux<T> aux;
        SpectralImage<T> ms(cam.height, cam.width, cloud.basis);
        ms.data = composite<T>(proj, radiance, bands, cam, ctx.render, &aux);
        std::optional<RgbImage<T>> rgb;
        if (use_rgb) rgb = convert_pixel_level(ms, ctx.pipe);
        std::optional<ImageView<T>> pred_rgb;
        if (rgb) pred_rgb.emplace(*rgb);
        auto dl = dual_loss<T>(ImageView<T>(ms), gt_ms, pred_rgb, gt_rgb, cfg);
        out.loss = dl.breakdown;
        if (!want_grad) return out;
        std::vector<T> grad_img(ms.data.size(), T(0));
        if (use_ms) add_into(grad_img, dl.grad_ms);
        if (use_rgb) add_into(grad_img, convert_pixel_level_vjp<T>(ms, ctx.pipe, dl.grad_rgb));
        cg = composite_backward<T>(proj, radiance, bands, aux, ctx.render, grad_img);
        grad_radiance = std::move(cg.colors);
    } else {
        CompositeAux<T> aux_ms, aux_rgb;
        std::optional<SpectralImage<T>> ms;
        std::optional<RgbImage<T>> rgb;
        std::vector<T> colors;
        const RenderSettings rgb_render = rgb_render_settings(ctx.render, ctx.pipe);
        if (use_ms) {
            ms.emplace(cam.height, cam.width, cloud.basis);
            ms->data = composite<T>(proj, radiance, bands, cam, ctx.render, &aux_ms);
        }
        if (use_rgb) {
            colors = convert_gaussian_colors<T>(radiance, bands, ctx.pipe);
            rgb.emplace(cam.height, cam.width, ctx.pipe.output_space());
            rgb->data = composite<T>(proj, colors, 3, cam, rgb_render, &aux_rgb);
        }
        std::optional<ImageView<T>> pred_ms, pred_rgb;
        if (ms) pred_ms.emplace(*ms);
        if (rgb) pred_rgb.emplace(*rgb);
        auto dl = dual_loss<T>(pred_ms, gt_ms, pred_rgb, gt_rgb, cfg);
        out.loss = dl.breakdown;
        if (!want_grad) return out;
        const std::size_t n = cloud.size();
        cg.mean2d.assign(2 * n, T(0));
        cg.conic.assign(3 * n, T(0));
        cg.opacity.assign(n, T(0));
        grad_radiance.assign(radiance.size(), T(0));
        if (use_ms) {
            auto g = composite_backward<T>(proj, radiance, bands, aux_ms, ctx.render, dl.grad_ms);
            add_into(grad_radiance, g.colors);
            add_into(cg.mean2d, g.mean2d);
            add_into(cg.conic, g.conic);
            add_into(cg.opacity, g.opacity);
        }
        if (use_rgb) {
            auto g = composite_backward<T>(proj, colors, 3, aux_rgb, rgb_render, dl.grad_rgb);
            convert_gaussian_colors_vjp<T>(radiance, bands, ctx.pipe, g.colors, grad_radiance);
            add_into(cg.mean2d, g.mean2d);
            add_into(cg.conic, g.conic);
            add_into(cg.opacity, g.opacity);
        }
    }
    out.grad = ParamGradients<T>(cloud);
    project_backward(cloud, cam, proj, cg, out.grad);
    shade_backward<T>(cloud, proj, pre, grad_radiance, out.grad);
    return out;
}

template <typename T>
LossBreakdown train_step(GaussianCloud<T>& cloud, OptimizerState<T>& state, const TrainView<T>& view,
                         const TrainConfig& cfg, const TrainContext<T>& ctx, int iteration, DensifyStats* stats,
                         double spatial_scale) {
    auto lg = loss_and_gradients(cloud, view, cfg, ctx, true);
    if (stats) {
        if (stats->grad_norm_sum.size() != cloud.size()) stats->reset(cloud.size());
        for (std::size_t i = 0; i < cloud.size(); ++i) {
            if (!lg.visible[i]) continue;
            // NDC units
            const double gx = static_cast<double>(lg.grad.mean2d[2 * i]) * 0.5 * view.camera->width;
            const double gy = static_cast<double>(lg.grad.mean2d[2 * i + 1]) * 0.5 * view.camera->height;
            stats->grad_norm_sum[i] += std::sqrt(gx * gx + gy * gy);
            stats->visible_count[i] += 1;
        }
    }
    adam_step(cloud, state, lg.grad, rates_at(cfg, iteration, spatial_scale));
    return lg.loss;
}

// ---------------------------------------------------------------------------
// Densification
// ---------------------------------------------------------------------------

template <typename T>
void densify_and_prune(GaussianCloud<T>& cloud, OptimizerState<T>& state, const DensifyStats& stats,
                       const DensifyConfig& cfg, std::mt19937_64& rng) {
    const std::size_t n = cloud.size();
    const bool have_stats = stats.grad_norm_sum.size() == n;
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);

    GaussianCloud<T> added(cloud.basis, cloud.sh_degree, 0);
    std::vector<bool> split_parent(n, false);
    auto rotate_scaled = [&](std::size_t i, const std::array<double, 3>& local) {
        const T* q = cloud.rotations.data() + 4 * i;
        const double w = q[0], x = q[1], y = q[2], z = q[3];
        const double r[3][3] = {{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
                                {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
                                {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}};
        std::array<double, 3> s{};
        for (int c = 0; c < 3; ++c) s[static_cast<std::size_t>(c)] = std::exp(static_cast<double>(cloud.log_scales[3 * i + static_cast<std::size_t>(c)])) * local[static_cast<std::size_t>(c)];
        std::array<T, 3> out{};
        for (int a = 0; a < 3; ++a)
            out[static_cast<std::size_t>(a)] = static_cast<T>(r[a][0] * s[0] + r[a][1] * s[1] + r[a][2] * s[2]);
        return out;
    };
    auto append = [&](std::size_t i, const std::array<T, 3>& offset, T log_scale_shift) {
        std::array<T, 3> pos{}, ls{};
        for (int c = 0; c < 3; ++c) {
            pos[static_cast<std::size_t>(c)] = cloud.positions[3 * i + static_cast<std::size_t>(c)] + offset[static_cast<std::size_t>(c)];
            ls[static_cast<std::size_t>(c)] = cloud.log_scales[3 * i + static_cast<std::size_t>(c)] + log_scale_shift;
        }
        added.push_back(std::span<const T, 3>(pos), std::span<const T, 3>(ls),
                        std::span<const T, 4>(cloud.rotations.data() + 4 * i, 4), cloud.opacity_logits[i], cloud.sh_of(i));
    };

    if (have_stats) {
        for (std::size_t i = 0; i < n; ++i) {
            if (stats.visible_count[i] == 0) continue;
            const double avg = stats.grad_norm_sum[i] / stats.visible_count[i];
            if (!(avg > cfg.grad_threshold)) continue;
            const double max_scale = std::exp(static_cast<double>(
                std::max({cloud.log_scales[3 * i], cloud.log_scales[3 * i + 1], cloud.log_scales[3 * i + 2]})));
            if (max_scale <= cfg.scale_split_threshold) {
                // clone: offset drawn uniformly from the 1-sigma ellipsoid
                std::array<double, 3> u{normal(rng), normal(rng), normal(rng)};
                const double len = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
                const double radius = std::cbrt(uniform(rng));
                for (auto& v : u) v = len > 0 ? v / len * radius : 0.0;
                append(i, rotate_scaled(i, u), T(0));
            } else {
                split_parent[i] = true;
                const T shrink = static_cast<T>(-std::log(1.6));
                for (int child = 0; child < 2; ++child) {
                    const std::array<double, 3> u{normal(rng), normal(rng), normal(rng)};
                    append(i, rotate_scaled(i, u), shrink);
                }
            }
        }
    }

    const std::size_t m = added.size();
    std::vector<bool> keep(n + m, true);
    std::size_t kept = 0;
    const double thr = cfg.opacity_prune_threshold;
    for (std::size_t i = 0; i < n; ++i) {
        keep[i] = !split_parent[i] && sigmoid(static_cast<double>(cloud.opacity_logits[i])) >= thr;
        kept += keep[i];
    }
    for (std::size_t j = 0; j < m; ++j) {
        keep[n + j] = sigmoid(static_cast<double>(added.opacity_logits[j])) >= thr;
        kept += keep[n + j];
    }
    if (kept == 0) throw Error("densify_and_prune: pruning would remove every Gaussian");

    std::vector<bool> keep_old(keep.begin(), keep.begin() + static_cast<std::ptrdiff_t>(n));
    std::vector<bool> keep_new(keep.begin() + static_cast<std::ptrdiff_t>(n), keep.end());
    added.filter(keep_new);
    state.filter_and_grow(cloud, keep_old, added.size());
    cloud.filter(keep_old);
    for (auto [dst, src] : {std::pair{&cloud.positions, &added.positions}, std::pair{&cloud.log_scales, &added.log_scales},
                            std::pair{&cloud.rotations, &added.rotations},
                            std::pair{&cloud.opacity_logits, &added.opacity_logits},
                            std::pair{&cloud.sh_coeffs, &added.sh_coeffs}})
        dst->insert(dst->end(), src->begin(), src->end());
}

// ---------------------------------------------------------------------------
// Evaluation and the training loop
// ---------------------------------------------------------------------------

ColorPipeConfig effective_color_config(const TrainConfig& cfg, ColorPipeConfig base) {
    base.apply_gamma = cfg.apply_gamma;
    base.apply_white_balance = cfg.apply_white_balance;
    return base;
}

template <typename T>
RgbImage<T> ground_truth_rgb(const View<T>& view, const ColorPipe& pipe) {
    if (view.rgb) return *view.rgb;
    auto rgb = convert_pixel_level(view.spectral, pipe);
    clamp_for_output(rgb);
    return rgb;
}

template <typename T>
EvalMetrics evaluate(const GaussianCloud<T>& cloud, std::span<const View<T>> views, ConversionStage stage,
                     const TrainContext<T>& ctx) {
    EvalMetrics m;
    if (views.empty()) return m;
    const int bands = cloud.bands();
    m.band_psnr.assign(static_cast<std::size_t>(bands), 0.0);
    for (const auto& v : views) {
        const auto render = rasterize(cloud, v.camera, ctx.render);
        const ImageView<T> pred(render.image), gt(v.spectral);
        m.spectral_psnr += psnr(pred, gt);
        m.spectral_ssim += static_cast<double>(ssim(pred, gt));
        for (int b = 0; b < bands; ++b) m.band_psnr[static_cast<std::size_t>(b)] += psnr_channel(pred, gt, b);

        RgbImage<T> rgb;
        if (stage == ConversionStage::PixelLevel) {
            rgb = convert_pixel_level(render.image, ctx.pipe);
        } else {
            rgb = convert_gaussian_level(cloud, v.camera, ctx.pipe, rgb_render_settings(ctx.render, ctx.pipe)).image;
        }
        clamp_for_output(rgb);
        const auto gt_rgb = ground_truth_rgb(v, ctx.pipe);
        m.rgb_psnr += psnr(ImageView<T>(rgb), ImageView<T>(gt_rgb));
        m.rgb_ssim += static_cast<double>(ssim(ImageView<T>(rgb), ImageView<T>(gt_rgb)));
    }
    const double inv = 1.0 / static_cast<double>(views.size());
    m.spectral_psnr *= inv;
    m.spectral_ssim *= inv;
    m.rgb_psnr *= inv;
    m.rgb_ssim *= inv;
    for (auto& b : m.band_psnr) b *= inv;
    return m;
}

template <typename T>
std::pair<GaussianCloud<T>, TrainReport> train(const Scene<T>& scene, const TrainConfig& cfg,
                                               const ColorPipeConfig& color, const RenderSettings& render,
                                               int sh_degree, const TrainHooks<T>& hooks) {
    if (const auto errs = validate_train_config(cfg); !errs.empty()) throw ConfigError("invalid training config: " + errs.front());
    const auto start = std::chrono::steady_clock::now();

    std::vector<View<T>> train_views, test_views;
    for (const auto& v : scene.views) (v.test ? test_views : train_views).push_back(v);
    if (train_views.empty()) throw ContractViolation("train: scene has no training views");
    if (test_views.empty()) test_views = train_views;

    GaussianCloud<T> cloud = scene.cloud ? *scene.cloud : init_from_points<T>(scene.points, scene.basis, sh_degree);
    if (cloud.basis != scene.basis) throw ContractViolation("train: initial cloud basis differs from scene basis");

    const TrainContext<T> ctx{ColorPipe(scene.basis, effective_color_config(cfg, color)), render};
    std::vector<RgbImage<T>> gt_rgb;
    gt_rgb.reserve(train_views.size());
    for (const auto& v : train_views) gt_rgb.push_back(ground_truth_rgb(v, ctx.pipe));
    const double spatial = cfg.spatial_lr_scale > 0 ? cfg.spatial_lr_scale : camera_extent(scene.views);

    OptimizerState<T> state(cloud);
    DensifyStats stats;
    stats.reset(cloud.size());
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order;
    std::size_t cursor = 0;

    TrainReport report;
    for (int it = 0; it < cfg.iterations; ++it) {
        if (cursor == order.size()) {
            order.resize(train_views.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        const std::size_t vi = order[cursor++];
        const TrainView<T> tv{&train_views[vi].camera, &train_views[vi].spectral, &gt_rgb[vi]};
        const auto loss = train_step(cloud, state, tv, cfg, ctx, it, &stats, spatial);
        report.history.push_back(loss);
        if (hooks.on_iteration) hooks.on_iteration(it, loss, cloud.size());

        const int done = it + 1;
        const auto& d = cfg.densify;
        if (d.enabled && it >= d.start_iter && it < d.stop_iter && done % d.interval == 0) {
            densify_and_prune(cloud, state, stats, d, rng);
            stats.reset(cloud.size());
        }
        if (cfg.opacity_reset && cfg.opacity_reset_interval > 0 && done % cfg.opacity_reset_interval == 0 &&
            done < cfg.iterations) {
            const T cap = static_cast<T>(logit(0.01));
            for (auto& o : cloud.opacity_logits) o = std::min(o, cap);
            state.reset_opacity();
        }
        if (cfg.eval_interval > 0 && done % cfg.eval_interval == 0 && done < cfg.iterations) {
            auto m = evaluate<T>(cloud, test_views, cfg.conversion_stage, ctx);
            m.iteration = done;
            if (hooks.on_eval) hooks.on_eval(m);
            report.evals.push_back(std::move(m));
        }
        if (cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && hooks.on_checkpoint)
            hooks.on_checkpoint(done, cloud);
    }
    auto final_metrics = evaluate<T>(cloud, test_views, cfg.conversion_stage, ctx);
    final_metrics.iteration = cfg.iterations;
    if (hooks.on_eval) hooks.on_eval(final_metrics);
    report.evals.push_back(std::move(final_metrics));
    report.final_count = cloud.size();
    report.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {std::move(cloud), std::move(report)};
}

#define MSGS_INSTANTIATE_TRAINER(T)                                                                                 \
    template struct OptimizerState<T>;                                                                              \
    template void adam_step<T>(GaussianCloud<T>&, OptimizerState<T>&, const ParamGradients<T>&, const StepRates&);  \
    template GaussianCloud<T> init_from_points<T>(std::span<const PointSample>, const SpectralBasis&, int);         \
    template LossAndGrad<T> loss_and_gradients<T>(const GaussianCloud<T>&, const TrainView<T>&, const TrainConfig&, \
                                                  const TrainContext<T>&, bool);                                    \
    template LossBreakdown train_step<T>(GaussianCloud<T>&, OptimizerState<T>&, const TrainView<T>&,                \
                                         const TrainConfig&, const TrainContext<T>&, int, DensifyStats*, double);   \
    template void densify_and_prune<T>(GaussianCloud<T>&, OptimizerState<T>&, const DensifyStats&,                  \
                                       const DensifyConfig&, std::mt19937_64&);                                     \
    template RgbImage<T> ground_truth_rgb<T>(const View<T>&, const ColorPipe&);                                     \
    template EvalMetrics evaluate<T>(const GaussianCloud<T>&, std::span<const View<T>>, ConversionStage,            \
                                     const TrainContext<T>&);                                                       \
    template std::pair<GaussianCloud<T>, TrainReport> train<T>(const Scene<T>&, const TrainConfig&,                 \
                                                               const ColorPipeConfig&, const RenderSettings&, int,  \
                                                               const TrainHooks<T>&);

MSGS_INSTANTIATE_TRAINER(float)
MSGS_INSTANTIATE_TRAINER(double)

}  // namespace msgs

#include "commands.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>

#include "msgs/scene_io.hpp"

namespace msgs::cli {

using nlohmann::json;

namespace {

void apply_overrides(RunConfig& cfg, const Overrides& o) {
    if (o.stage) cfg.train.conversion_stage = parse_stage(*o.stage);
    if (o.loss) cfg.train.loss_mode = parse_loss_mode(*o.loss);
    if (o.bands) cfg.bands = *o.bands;
    if (o.seed) cfg.train.seed = *o.seed;
    if (o.iterations) cfg.train.iterations = *o.iterations;
    if (o.threads) cfg.threads = *o.threads;
    validate(cfg);
    set_num_threads(cfg.threads);
}

RunConfig resolve(const fs::path& config, const Overrides& o) {
    RunConfig cfg = config.empty() ? RunConfig{} : load_run_config(config);
    apply_overrides(cfg, o);
    return cfg;
}

void check_background(const RenderSettings& r, int bands) {
    if (!r.background.empty() && static_cast<int>(r.background.size()) != bands)
        throw ConfigError("render.background has " + std::to_string(r.background.size()) + " values, scene has " +
                          std::to_string(bands) + " bands");
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream f(p, std::ios::trunc);
    if (!f) throw Error("cannot write " + p.string());
    return f;
}

void write_json(const fs::path& p, const json& j) {
    auto f = open_out(p);
    f << j.dump(2) << "\n";
}

std::vector<int> mask_for(const RunConfig& cfg, const SpectralBasis& basis) {
    return parse_band_mask(cfg.bands, basis);
}

/// Restricts the cloud to `target` when it was saved over a superset basis.
GaussianCloud<float> match_basis(const GaussianCloud<float>& cloud, const SpectralBasis& full,
                                 const SpectralBasis& target, std::span<const int> mask) {
    if (cloud.basis == target) return cloud;
    if (cloud.basis == full) return select_bands(cloud, mask);
    throw BandCountMismatchError("checkpoint has " + std::to_string(cloud.bands()) +
                                 " bands whose wavelengths match neither the scene nor its mask");
}

}  // namespace

std::string metrics_record(const EvalMetrics& m, const SpectralBasis& basis) {
    json j;
    j["type"] = "eval";
    j["iteration"] = m.iteration;
    j["spectral_psnr"] = m.spectral_psnr;
    j["spectral_ssim"] = m.spectral_ssim;
    j["rgb_psnr"] = m.rgb_psnr;
    j["rgb_ssim"] = m.rgb_ssim;
    j["band_psnr"] = m.band_psnr;
    j["wavelengths_nm"] = basis.wavelengths_nm();
    return j.dump();
}

void print_metrics(std::ostream& os, const EvalMetrics& m, const SpectralBasis& basis) {
    const auto flags = os.flags();
    os << std::fixed << std::setprecision(4);
    os << "iteration " << m.iteration << "\n";
    os << "  spectral  PSNR " << std::setw(9) << m.spectral_psnr << " dB   SSIM " << m.spectral_ssim << "\n";
    os << "  rgb       PSNR " << std::setw(9) << m.rgb_psnr << " dB   SSIM " << m.rgb_ssim << "\n";
    os << "  band  wavelength_nm      PSNR\n";
    for (std::size_t b = 0; b < m.band_psnr.size(); ++b)
        os << "  " << std::setw(4) << b << "  " << std::setw(13) << std::setprecision(2) << basis[static_cast<int>(b)]
           << "  " << std::setw(8) << std::setprecision(4) << m.band_psnr[b] << "\n";
    os.flags(flags);
}

TrainReport run_train(const TrainOptions& opt, std::ostream& log) {
    RunConfig cfg = opt.config.empty() ? RunConfig{} : load_run_config(opt.config);
    if (!opt.scene.empty()) cfg.scene = opt.scene;
    if (!opt.out.empty()) cfg.output_dir = opt.out;
    if (cfg.scene.empty()) throw ConfigError("train: no scene (use --scene or the config key 'scene')");
    if (cfg.output_dir.empty()) throw ConfigError("train: no output directory (use --out or the config key 'output_dir')");
    cfg.scene = fs::absolute(cfg.scene);
    cfg.output_dir = fs::absolute(cfg.output_dir);
    apply_overrides(cfg, opt.overrides);

    const ColorPipeConfig color = effective_color_config(cfg.train, cfg.color);
    Scene<float> scene = load_scene(cfg.scene, color);
    if (cfg.bands != "all") scene = select_bands(scene, mask_for(cfg, scene.basis));
    check_background(cfg.render, scene.basis.band_count());

    const fs::path out = cfg.output_dir;
    fs::create_directories(out / "checkpoints");
    write_json(out / "effective_config.json", to_json(cfg));
    auto train_log = open_out(out / "train_log.jsonl");
    auto metrics_log = open_out(out / "metrics.jsonl");

    TrainHooks<float> hooks;
    hooks.on_iteration = [&](int it, const LossBreakdown& l, std::size_t count) {
        json j{{"iteration", it}, {"l_ms", l.l_ms}, {"l_rgb", l.l_rgb}, {"l_total", l.l_total}, {"count", count}};
        train_log << j.dump() << "\n";
        if (!opt.quiet && (it + 1) % 100 == 0)
            log << "iter " << (it + 1) << "/" << cfg.train.iterations << "  loss " << l.l_total << "  gaussians " << count
                << "\n";
    };
    hooks.on_checkpoint = [&](int it, const GaussianCloud<float>& cloud) {
        char name[64];
        std::snprintf(name, sizeof(name), "iter_%06d.ply", it);
        save_cloud(out / "checkpoints" / name, cloud);
    };
    hooks.on_eval = [&](const EvalMetrics& m) {
        metrics_log << metrics_record(m, scene.basis) << "\n";
        if (!opt.quiet) print_metrics(log, m, scene.basis);
    };

    auto [cloud, report] = train<float>(scene, cfg.train, cfg.color, cfg.render, cfg.sh_degree, hooks);
    save_cloud(out / "cloud.ply", cloud);
    {
        auto f = open_out(out / "metrics.txt");
        print_metrics(f, report.evals.back(), scene.basis);
    }
    write_json(out / "summary.json", {{"iterations", cfg.train.iterations},
                                      {"final_count", report.final_count},
                                      {"wall_clock_seconds", report.wall_clock_seconds}});
    if (!opt.quiet) log << "wrote " << (out / "cloud.ply").string() << " (" << report.final_count << " Gaussians, "
                        << std::fixed << std::setprecision(1) << report.wall_clock_seconds << " s)\n";
    return report;
}

void run_synth(const SynthOptions& opt, std::ostream& log) {
    if (opt.out.empty()) throw ConfigError("synth: no output directory (use --out)");
    Overrides o;
    o.threads = opt.threads;
    const RunConfig cfg = resolve(opt.config, o);
    const auto basis = default_basis(opt.synth.n_bands);
    check_background(cfg.render, basis.band_count());
    const auto color = effective_color_config(cfg.train, cfg.color);
    const auto s = make_synthetic_scene<float>(opt.synth, basis, color, cfg.render);
    save_scene(opt.out, s.scene);
    save_cloud(opt.out / "gt_cloud.ply", s.ground_truth);
    const auto& c = opt.synth;
    write_json(opt.out / "synth_config.json",
               {{"seed", c.seed}, {"n_gaussians", c.n_gaussians}, {"n_bands", c.n_bands}, {"n_views", c.n_views},
                {"resolution", c.resolution}, {"sh_degree", c.sh_degree}, {"n_init_points", c.n_init_points},
                {"init_jitter", c.init_jitter}, {"init_color_noise", c.init_color_noise},
                {"object_radius", c.object_radius}, {"camera_distance", c.camera_distance},
                {"focal_factor", c.focal_factor}, {"test_every", c.test_every}, {"peak_luminance", c.peak_luminance},
                {"sh_rest_amplitude", c.sh_rest_amplitude}, {"wavelengths_nm", basis.wavelengths_nm()}});
    std::size_t tests = 0;
    for (const auto& v : s.scene.views) tests += v.test;
    log << "wrote " << (opt.out / "scene.json").string() << ": " << s.scene.views.size() << " views (" << tests
        << " held out), " << basis.band_count() << " bands, " << c.n_gaussians << " ground-truth Gaussians, "
        << s.scene.points.size() << " init points\n";
}

void run_render(const RenderOptions& opt, std::ostream& log) {
    if (opt.out.empty()) throw ConfigError("render: no output directory (use --out)");
    if (opt.checkpoint.empty()) throw ConfigError("render: no checkpoint (use --checkpoint)");
    if (opt.scene.empty() == opt.transforms.empty())
        throw ConfigError("render: give exactly one of --scene or --transforms");
    const RunConfig cfg = resolve(opt.config, opt.overrides);
    GaussianCloud<float> cloud = load_cloud<float>(opt.checkpoint);
    if (cfg.bands != "all") {
        const auto mask = mask_for(cfg, cloud.basis);
        cloud = select_bands(cloud, mask);
    }
    check_background(cfg.render, cloud.bands());

    std::vector<std::pair<std::string, Camera<float>>> cams;
    if (!opt.scene.empty()) {
        const auto scene = load_scene(opt.scene);
        for (const auto& v : scene.views) cams.emplace_back(v.name, v.camera);
    } else {
        const auto imported = import_nvs_transforms(opt.transforms, opt.width, opt.height);
        for (std::size_t i = 0; i < imported.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "frame_%04zu", i);
            cams.emplace_back(name, imported[i].camera);
        }
    }
    const bool want_rgb = opt.rgb || !opt.spectral;
    const ColorPipe pipe(cloud.basis, effective_color_config(cfg.train, cfg.color));
    fs::create_directories(opt.out);
    for (const auto& [name, cam] : cams) {
        if (auto errs = validate_camera(cam); !errs.empty()) throw ContractViolation(name + ": " + errs.front());
        if (opt.spectral || cfg.train.conversion_stage == ConversionStage::PixelLevel) {
            const auto r = rasterize(cloud, cam, cfg.render);
            if (opt.spectral) save_cube(opt.out / (name + ".cube"), r.image);
            if (want_rgb && cfg.train.conversion_stage == ConversionStage::PixelLevel) {
                auto rgb = convert_pixel_level(r.image, pipe);
                clamp_for_output(rgb);
                save_pfm<float>(opt.out / (name + ".pfm"), rgb.data, rgb.height, rgb.width, 3);
                save_ppm(opt.out / (name + ".ppm"), rgb);
            }
        }
        if (want_rgb && cfg.train.conversion_stage == ConversionStage::GaussianLevel) {
            auto rgb = convert_gaussian_level(cloud, cam, pipe, rgb_render_settings(cfg.render, pipe)).image;
            clamp_for_output(rgb);
            save_pfm<float>(opt.out / (name + ".pfm"), rgb.data, rgb.height, rgb.width, 3);
            save_ppm(opt.out / (name + ".ppm"), rgb);
        }
    }
    log << "rendered " << cams.size() << " views to " << opt.out.string() << "\n";
}

void run_convert(const ConvertOptions& opt, std::ostream& log) {
    if (opt.out.empty()) throw ConfigError("convert: no output directory (use --out)");
    const RunConfig cfg = resolve(opt.config, opt.overrides);
    SpectralImage<float> cube = load_cube<float>(opt.cube);
    if (cfg.bands != "all") cube = select_bands(cube, mask_for(cfg, cube.basis));
    const ColorPipe pipe(cube.basis, effective_color_config(cfg.train, cfg.color));
    auto rgb = convert_pixel_level(cube, pipe);
    clamp_for_output(rgb);
    fs::create_directories(opt.out);
    const std::string stem = opt.cube.stem().string();
    save_pfm<float>(opt.out / (stem + ".rgb.pfm"), rgb.data, rgb.height, rgb.width, 3);
    save_ppm(opt.out / (stem + ".rgb.ppm"), rgb);
    log << "wrote " << (opt.out / (stem + ".rgb.pfm")).string() << "\n";
}

EvalMetrics run_eval(const EvalOptions& opt, std::ostream& log) {
    if (opt.checkpoint.empty() || opt.scene.empty()) throw ConfigError("eval: need --checkpoint and --scene");
    if (opt.split != "test" && opt.split != "train" && opt.split != "all")
        throw ConfigError("eval: --split must be test, train or all");
    const RunConfig cfg = resolve(opt.config, opt.overrides);
    const ColorPipeConfig color = effective_color_config(cfg.train, cfg.color);
    Scene<float> scene = load_scene(opt.scene, color);
    const SpectralBasis full = scene.basis;
    const auto mask = mask_for(cfg, full);
    if (cfg.bands != "all") scene = select_bands(scene, mask);
    check_background(cfg.render, scene.basis.band_count());
    const auto cloud = match_basis(load_cloud<float>(opt.checkpoint), full, scene.basis, mask);

    std::vector<View<float>> views;
    for (const auto& v : scene.views)
        if (opt.split == "all" || (opt.split == "test") == v.test) views.push_back(v);
    if (views.empty()) throw ContractViolation("eval: scene has no '" + opt.split + "' views");
    const TrainContext<float> ctx{ColorPipe(scene.basis, color), cfg.render};
    EvalMetrics m = evaluate<float>(cloud, views, cfg.train.conversion_stage, ctx);
    print_metrics(log, m, scene.basis);
    log << metrics_record(m, scene.basis) << "\n";
    if (!opt.out.empty()) {
        fs::create_directories(opt.out);
        auto f = open_out(opt.out / "metrics.txt");
        print_metrics(f, m, scene.basis);
        auto g = open_out(opt.out / "metrics.jsonl");
        g << metrics_record(m, scene.basis) << "\n";
    }
    return m;
}

}  // namespace msgs::cli

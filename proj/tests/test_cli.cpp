#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "commands.hpp"
#include "doctest.h"
#include "msgs/scene_io.hpp"
#include "run_config.hpp"
#include "support.hpp"

using namespace msgs;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    out << s;
}

struct Run {
    int code = -1;
    std::string out, err;
};

// Runs the msgs executable with `args`, capturing both streams.
Run run_cli(const test::TempDir& dir, const std::string& args) {
    const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
    const std::string cmd = std::string("\"") + MSGS_CLI_PATH + "\" " + args + " > \"" + out.string() + "\" 2> \"" +
                            err.string() + "\"";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

json last_record(const fs::path& jsonl) {
    std::istringstream is(slurp(jsonl));
    std::string line, last;
    while (std::getline(is, line))
        if (!line.empty()) last = line;
    return json::parse(last);
}

const char* kSmallSynth = "synth --seed 3 --n_gaussians 12 --n_bands 5 --n_views 4 --resolution 16 --n_init_points 30";

}  // namespace

TEST_CASE("unknown config keys are rejected at every level") {
    cli::RunConfig cfg;
    CHECK_THROWS_AS(cli::apply_json(cfg, json{{"iteration", 5}}), ConfigError);
    CHECK_THROWS_AS(cli::apply_json(cfg, json{{"densify", {{"enable", true}}}}), ConfigError);
    CHECK_THROWS_AS(cli::apply_json(cfg, json{{"color", {{"whitepoint", "D65"}}}}), ConfigError);
    CHECK_THROWS_AS(cli::apply_json(cfg, json{{"render", {{"alpha", 0.1}}}}), ConfigError);
    CHECK_THROWS_AS(cli::apply_json(cfg, json{{"learning_rates", {{"positions", 1e-4}}}}), ConfigError);
    CHECK_THROWS_AS(cli::apply_json(cfg, json{{"color", {{"white_point", "D50"}}}}), ConfigError);
    CHECK_NOTHROW(cli::apply_json(cfg, json{{"iterations", 5}, {"densify", {{"enabled", true}}}}));
    CHECK(cfg.train.iterations == 5);
    CHECK(cfg.train.densify.enabled);
}

TEST_CASE("serialized config reproduces every field") {
    cli::RunConfig cfg;
    cli::apply_json(cfg, json::parse(R"({
        "iterations": 77, "lambda_ms": 0.25, "lambda_rgb": 2.0, "conversion_stage": "gaussian",
        "loss_mode": "ms", "dssim_weight": 0.5, "seed": 99, "apply_gamma": false, "bands": "1-3",
        "learning_rates": {"sh0": 0.01, "position_final": 1e-7},
        "densify": {"enabled": true, "interval": 50, "grad_threshold": 0.001},
        "color": {"white_point": "EqualEnergy", "gamma_mode": "power", "gamma": 2.4, "quadrature_weights": true},
        "render": {"t_min": 0.0, "tile_size": 8, "background": [0.1, 0.2]}, "sh_degree": 2, "threads": 3})"));
    const json once = cli::to_json(cfg);
    cli::RunConfig again;
    cli::apply_json(again, once);
    CHECK(cli::to_json(again) == once);
    CHECK(again.train.conversion_stage == ConversionStage::GaussianLevel);
    CHECK(again.train.lr.sh0 == 0.01);
    CHECK(again.color.gamma_mode == GammaMode::Power);
    CHECK(again.render.background == std::vector<double>{0.1, 0.2});

    cli::RunConfig defaults;
    const json d = cli::to_json(defaults);
    cli::RunConfig from_defaults;
    cli::apply_json(from_defaults, d);
    CHECK(cli::to_json(from_defaults) == d);
}

TEST_CASE("config validation names the offending field") {
    cli::RunConfig cfg;
    cfg.render.t_min = 1.5;
    CHECK_THROWS_AS(cli::validate(cfg), ConfigError);
    cfg = {};
    cfg.sh_degree = 4;
    CHECK_THROWS_AS(cli::validate(cfg), ConfigError);
    cfg = {};
    cfg.train.dssim_weight = 2;
    CHECK_THROWS_AS(cli::validate(cfg), ConfigError);
    cfg = {};
    CHECK_NOTHROW(cli::validate(cfg));
}

TEST_CASE("metrics record is one JSON line with every column") {
    EvalMetrics m;
    m.iteration = 12;
    m.band_psnr = {30.5, 31.5};
    m.spectral_psnr = 31;
    m.rgb_psnr = 29;
    m.rgb_ssim = 0.9;
    const SpectralBasis basis({500.0, 600.0});
    const auto line = cli::metrics_record(m, basis);
    CHECK(line.find('\n') == std::string::npos);
    const auto j = json::parse(line);
    CHECK(j["iteration"] == 12);
    CHECK(j["band_psnr"][1] == 31.5);
    CHECK(j["wavelengths_nm"][0] == 500.0);
    std::ostringstream os;
    cli::print_metrics(os, m, basis);
    CHECK(os.str().find("29.0000") != std::string::npos);
    CHECK(os.str().find("600.00") != std::string::npos);
}

TEST_CASE("convert of a one-hot pixel gives that band's colour-matching triplet through the pipe") {
    test::TempDir dir("cli_convert");
    const SpectralBasis basis({450.0, 530.0, 610.0, 680.0});
    for (int band = 0; band < 4; ++band) {
        SpectralImage<float> cube(1, 1, basis);
        cube.data[static_cast<std::size_t>(band)] = 1.0f;
        const auto path = dir / ("onehot" + std::to_string(band) + ".cube");
        save_cube(path, cube);
        const auto before = slurp(path);
        const auto r = run_cli(dir, "convert --cube " + q(path) + " --out " + q(dir / "rgb"));
        REQUIRE(r.code == 0);
        CHECK(slurp(path) == before);
        const auto pfm = load_pfm(dir / "rgb" / ("onehot" + std::to_string(band) + ".rgb.pfm"));
        REQUIRE(pfm.channels == 3);
        const ColorPipeConfig cfg;
        const auto cmf = resample_cmf(basis);
        const std::array<double, 3> xyz{cmf.x[static_cast<std::size_t>(band)], cmf.y[static_cast<std::size_t>(band)],
                                        cmf.z[static_cast<std::size_t>(band)]};
        const auto expected = xyz_to_rgb(xyz, cfg, cmf);
        for (std::size_t c = 0; c < 3; ++c) CHECK(pfm.data[c] == doctest::Approx(expected[c]).epsilon(1e-6));
    }
}

TEST_CASE("evaluating the ground-truth cloud on its own scene caps PSNR") {
    test::TempDir dir("cli_eval");
    REQUIRE(run_cli(dir, std::string(kSmallSynth) + " --out " + q(dir / "scene")).code == 0);
    const auto manifest_before = slurp(dir / "scene" / "scene.json");
    const auto r = run_cli(dir, "eval --checkpoint " + q(dir / "scene" / "gt_cloud.ply") + " --scene " +
                                    q(dir / "scene" / "scene.json") + " --out " + q(dir / "eval"));
    REQUIRE(r.code == 0);
    const auto j = last_record(dir / "eval" / "metrics.jsonl");
    CHECK(j["spectral_psnr"].get<double>() == 100.0);
    CHECK(j["rgb_psnr"].get<double>() == 100.0);
    for (const auto& b : j["band_psnr"]) CHECK(b.get<double>() == 100.0);
    CHECK(j["rgb_ssim"].get<double>() == doctest::Approx(1.0));
    CHECK(slurp(dir / "scene" / "scene.json") == manifest_before);
    CHECK(r.out.find("PSNR") != std::string::npos);
}

TEST_CASE("single-threaded training is reproducible from the command line and from its effective config") {
    test::TempDir dir("cli_train");
    REQUIRE(run_cli(dir, std::string(kSmallSynth) + " --out " + q(dir / "scene")).code == 0);
    const auto scene = dir / "scene" / "scene.json";
    const std::string common = " --threads 1 train --quiet --iterations 60 --seed 5 --scene " + q(scene);
    REQUIRE(run_cli(dir, common + " --out " + q(dir / "a")).code == 0);
    REQUIRE(run_cli(dir, common + " --out " + q(dir / "b")).code == 0);
    CHECK(slurp(dir / "a" / "metrics.txt") == slurp(dir / "b" / "metrics.txt"));
    CHECK(slurp(dir / "a" / "cloud.ply") == slurp(dir / "b" / "cloud.ply"));
    CHECK(slurp(dir / "a" / "train_log.jsonl") == slurp(dir / "b" / "train_log.jsonl"));
    CHECK(!slurp(dir / "a" / "metrics.txt").empty());

    auto eff = json::parse(slurp(dir / "a" / "effective_config.json"));
    CHECK(eff["iterations"] == 60);
    CHECK(eff["seed"] == 5);
    eff["output_dir"] = (dir / "c").string();
    spit(dir / "rerun.json", eff.dump(2));
    REQUIRE(run_cli(dir, "train --quiet --config " + q(dir / "rerun.json")).code == 0);
    CHECK(slurp(dir / "c" / "cloud.ply") == slurp(dir / "a" / "cloud.ply"));
    CHECK(slurp(dir / "c" / "metrics.txt") == slurp(dir / "a" / "metrics.txt"));
}

TEST_CASE("render writes one image per camera") {
    test::TempDir dir("cli_render");
    REQUIRE(run_cli(dir, std::string(kSmallSynth) + " --out " + q(dir / "scene")).code == 0);
    const auto r = run_cli(dir, "render --checkpoint " + q(dir / "scene" / "gt_cloud.ply") + " --scene " +
                                    q(dir / "scene" / "scene.json") + " --spectral --rgb --out " + q(dir / "img"));
    REQUIRE(r.code == 0);
    int cubes = 0, pfms = 0;
    for (const auto& e : fs::directory_iterator(dir / "img")) {
        cubes += e.path().extension() == ".cube";
        pfms += e.path().extension() == ".pfm";
    }
    CHECK(cubes == 4);
    CHECK(pfms == 4);
}

TEST_CASE("errors exit nonzero with a single-line diagnostic") {
    test::TempDir dir("cli_err");
    auto one_line = [](const Run& r) {
        CHECK(r.code != 0);
        CHECK(r.err.rfind("msgs: error:", 0) == 0);
        CHECK(r.err.find('\n') == r.err.size() - 1);
    };
    one_line(run_cli(dir, "convert --cube " + q(dir / "missing.cube") + " --out " + q(dir / "o")));
    one_line(run_cli(dir, "train --scene " + q(dir / "missing.json") + " --out " + q(dir / "o")));
    spit(dir / "bad.json", R"({"iterations": 10, "colour": {}})");
    one_line(run_cli(dir, "train --config " + q(dir / "bad.json") + " --scene x --out y"));
    one_line(run_cli(dir, "train --loss everything --scene x --out y"));
    one_line(run_cli(dir, "frobnicate"));
    SpectralImage<float> cube(1, 1, SpectralBasis({500.0, 600.0}));
    save_cube(dir / "c.cube", cube);
    const auto r = run_cli(dir, "convert --cube " + q(dir / "c.cube") + " --bands 0,5 --out " + q(dir / "o"));
    one_line(r);
    CHECK(r.err.find("band mask") != std::string::npos);
}

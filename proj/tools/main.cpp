#include <iostream>

#include "CLI11.hpp"
#include "commands.hpp"

namespace {

void add_overrides(CLI::App* cmd, msgs::cli::Overrides& o, bool training) {
    cmd->add_option("--stage", o.stage, "Conversion stage")->check(CLI::IsMember({"gaussian", "pixel"}));
    cmd->add_option("--bands", o.bands, "Band mask: all | 0,2,5 | 1-15 | nm:431-808");
    if (training) {
        cmd->add_option("--loss", o.loss, "Loss mode")->check(CLI::IsMember({"rgb", "ms", "dual"}));
        cmd->add_option("--seed", o.seed, "Training seed");
        cmd->add_option("--iterations", o.iterations, "Training iterations");
    }
}

}  // namespace

int main(int argc, char** argv) {
    using namespace msgs::cli;
    CLI::App app{"Multispectral Gaussian splatting: train, render, convert, eval, synth"};
    app.require_subcommand(1);
    std::optional<int> threads;
    app.add_option("--threads", threads, "OpenMP threads (1 = deterministic reference mode)")
        ->check(CLI::NonNegativeNumber);

    TrainOptions train;
    auto* c_train = app.add_subcommand("train", "Fit a Gaussian cloud to a scene");
    c_train->add_option("--config", train.config, "Run config (JSON)");
    c_train->add_option("--scene", train.scene, "Scene manifest (overrides config)");
    c_train->add_option("--out", train.out, "Output directory (overrides config)");
    c_train->add_flag("--quiet", train.quiet, "Only write files");
    add_overrides(c_train, train.overrides, true);

    RenderOptions render;
    auto* c_render = app.add_subcommand("render", "Render a checkpoint");
    c_render->add_option("--checkpoint", render.checkpoint, "Cloud checkpoint (.ply)")->required();
    c_render->add_option("--scene", render.scene, "Scene manifest supplying cameras");
    c_render->add_option("--transforms", render.transforms, "transforms.json supplying cameras");
    c_render->add_option("--width", render.width, "Image width for --transforms");
    c_render->add_option("--height", render.height, "Image height for --transforms");
    c_render->add_flag("--spectral", render.spectral, "Write spectral cubes");
    c_render->add_flag("--rgb", render.rgb, "Write RGB images (default)");
    c_render->add_option("--config", render.config, "Run config (colour / render settings)");
    c_render->add_option("--out", render.out, "Output directory")->required();
    add_overrides(c_render, render.overrides, false);

    ConvertOptions convert;
    auto* c_convert = app.add_subcommand("convert", "Convert a spectral cube to RGB");
    c_convert->add_option("--cube", convert.cube, "Input cube")->required();
    c_convert->add_option("--config", convert.config, "Run config (colour settings)");
    c_convert->add_option("--out", convert.out, "Output directory")->required();
    c_convert->add_option("--bands", convert.overrides.bands, "Band mask");

    EvalOptions eval;
    auto* c_eval = app.add_subcommand("eval", "Metrics of a checkpoint against a scene");
    c_eval->add_option("--checkpoint", eval.checkpoint, "Cloud checkpoint (.ply)")->required();
    c_eval->add_option("--scene", eval.scene, "Scene manifest")->required();
    c_eval->add_option("--config", eval.config, "Run config (colour / render settings)");
    c_eval->add_option("--out", eval.out, "Directory for metrics.txt / metrics.jsonl");
    c_eval->add_option("--split", eval.split, "Views to evaluate")->check(CLI::IsMember({"test", "train", "all"}));
    add_overrides(c_eval, eval.overrides, false);

    SynthOptions synth;
    auto* c_synth = app.add_subcommand("synth", "Generate a synthetic scene with ground truth");
    auto& s = synth.synth;
    c_synth->add_option("--seed", s.seed, "Scene seed");
    c_synth->add_option("--n_gaussians", s.n_gaussians, "Ground-truth Gaussians");
    c_synth->add_option("--n_bands", s.n_bands, "Spectral bands");
    c_synth->add_option("--n_views", s.n_views, "Camera views");
    c_synth->add_option("--resolution", s.resolution, "Image width and height");
    c_synth->add_option("--n_init_points", s.n_init_points, "Points of the jittered initialization");
    c_synth->add_option("--sh_degree", s.sh_degree, "SH degree of the ground truth");
    c_synth->add_option("--test_every", s.test_every, "Hold out every k-th view (0 = none)");
    c_synth->add_option("--config", synth.config, "Run config (colour / render settings)");
    c_synth->add_option("--out", synth.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "msgs: error: " << e.what() << "\n";
        return e.get_exit_code() != 0 ? e.get_exit_code() : 2;
    }

    try {
        if (threads) {
            train.overrides.threads = render.overrides.threads = convert.overrides.threads = eval.overrides.threads =
                synth.threads = *threads;
        }
        if (*c_train) run_train(train, std::cout);
        else if (*c_render) run_render(render, std::cout);
        else if (*c_convert) run_convert(convert, std::cout);
        else if (*c_eval) run_eval(eval, std::cout);
        else if (*c_synth) run_synth(synth, std::cout);
    } catch (const std::exception& e) {
        std::string msg = e.what();
        for (auto& ch : msg)
            if (ch == '\n') ch = ' ';
        std::cerr << "msgs: error: " << msg << "\n";
        return 1;
    }
    return 0;
}

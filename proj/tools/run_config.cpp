#include "run_config.hpp"

#include <fstream>
#include <set>

namespace msgs::cli {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key())) throw ConfigError("unknown config key '" + (where.empty() ? "" : where + ".") + it.key() + "'");
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const json::exception&) {
        throw ConfigError("config key '" + (where.empty() ? "" : where + ".") + key + "' has the wrong type");
    }
}

std::string white_point_name(WhitePoint w) {
    switch (w) {
        case WhitePoint::D65: return "D65";
        case WhitePoint::EqualEnergy: return "EqualEnergy";
        case WhitePoint::Custom: return "Custom";
    }
    return "D65";
}

}  // namespace

void apply_json(RunConfig& cfg, const json& j) {
    reject_unknown(j,
                   {"scene", "output_dir", "iterations", "learning_rates", "spatial_lr_scale", "lambda_ms", "lambda_rgb",
                    "conversion_stage", "loss_mode", "dssim_weight", "densify", "seed", "apply_gamma",
                    "apply_white_balance", "opacity_reset", "opacity_reset_interval", "eval_interval",
                    "checkpoint_interval", "sh_degree", "bands", "color", "render", "threads"},
                   "");
    if (j.contains("scene")) cfg.scene = j["scene"].get<std::string>();
    if (j.contains("output_dir")) cfg.output_dir = j["output_dir"].get<std::string>();
    auto& t = cfg.train;
    read(j, "iterations", t.iterations, "");
    read(j, "spatial_lr_scale", t.spatial_lr_scale, "");
    read(j, "lambda_ms", t.lambda_ms, "");
    read(j, "lambda_rgb", t.lambda_rgb, "");
    if (j.contains("conversion_stage")) t.conversion_stage = parse_stage(j["conversion_stage"].get<std::string>());
    if (j.contains("loss_mode")) t.loss_mode = parse_loss_mode(j["loss_mode"].get<std::string>());
    read(j, "dssim_weight", t.dssim_weight, "");
    read(j, "seed", t.seed, "");
    read(j, "apply_gamma", t.apply_gamma, "");
    read(j, "apply_white_balance", t.apply_white_balance, "");
    read(j, "opacity_reset", t.opacity_reset, "");
    read(j, "opacity_reset_interval", t.opacity_reset_interval, "");
    read(j, "eval_interval", t.eval_interval, "");
    read(j, "checkpoint_interval", t.checkpoint_interval, "");
    read(j, "sh_degree", cfg.sh_degree, "");
    read(j, "bands", cfg.bands, "");
    read(j, "threads", cfg.threads, "");

    if (j.contains("learning_rates")) {
        const auto& l = j["learning_rates"];
        const std::string w = "learning_rates";
        reject_unknown(l, {"position", "position_final", "scale", "rotation", "opacity", "sh0", "sh_rest"}, w);
        read(l, "position", t.lr.position, w);
        read(l, "position_final", t.lr.position_final, w);
        read(l, "scale", t.lr.scale, w);
        read(l, "rotation", t.lr.rotation, w);
        read(l, "opacity", t.lr.opacity, w);
        read(l, "sh0", t.lr.sh0, w);
        read(l, "sh_rest", t.lr.sh_rest, w);
    }
    if (j.contains("densify")) {
        const auto& d = j["densify"];
        const std::string w = "densify";
        reject_unknown(d, {"enabled", "interval", "grad_threshold", "opacity_prune_threshold", "scale_split_threshold",
                           "start_iter", "stop_iter"},
                       w);
        read(d, "enabled", t.densify.enabled, w);
        read(d, "interval", t.densify.interval, w);
        read(d, "grad_threshold", t.densify.grad_threshold, w);
        read(d, "opacity_prune_threshold", t.densify.opacity_prune_threshold, w);
        read(d, "scale_split_threshold", t.densify.scale_split_threshold, w);
        read(d, "start_iter", t.densify.start_iter, w);
        read(d, "stop_iter", t.densify.stop_iter, w);
    }
    if (j.contains("color")) {
        const auto& c = j["color"];
        const std::string w = "color";
        reject_unknown(c, {"white_point", "custom_white", "gamma_mode", "gamma", "xyz_to_linear_rgb", "quadrature_weights"}, w);
        if (c.contains("white_point")) {
            const auto wp = c["white_point"].get<std::string>();
            if (wp == "D65") cfg.color.white_point = WhitePoint::D65;
            else if (wp == "EqualEnergy") cfg.color.white_point = WhitePoint::EqualEnergy;
            else if (wp == "Custom") cfg.color.white_point = WhitePoint::Custom;
            else throw ConfigError("color.white_point must be D65, EqualEnergy or Custom, got '" + wp + "'");
        }
        read(c, "custom_white", cfg.color.custom_white, w);
        if (c.contains("gamma_mode")) {
            const auto gm = c["gamma_mode"].get<std::string>();
            if (gm == "srgb") cfg.color.gamma_mode = GammaMode::Srgb;
            else if (gm == "power") cfg.color.gamma_mode = GammaMode::Power;
            else throw ConfigError("color.gamma_mode must be srgb or power, got '" + gm + "'");
        }
        read(c, "gamma", cfg.color.gamma, w);
        if (c.contains("xyz_to_linear_rgb")) {
            if (c["xyz_to_linear_rgb"].is_null()) cfg.color.xyz_to_linear_rgb.reset();
            else cfg.color.xyz_to_linear_rgb = c["xyz_to_linear_rgb"].get<Mat3d>();
        }
        read(c, "quadrature_weights", cfg.color.quadrature_weights, w);
    }
    if (j.contains("render")) {
        const auto& r = j["render"];
        const std::string w = "render";
        reject_unknown(r, {"alpha_min", "alpha_max", "t_min", "blur", "tile_size", "guard_band", "background"}, w);
        read(r, "alpha_min", cfg.render.alpha_min, w);
        read(r, "alpha_max", cfg.render.alpha_max, w);
        read(r, "t_min", cfg.render.t_min, w);
        read(r, "blur", cfg.render.blur, w);
        read(r, "tile_size", cfg.render.tile_size, w);
        read(r, "guard_band", cfg.render.guard_band, w);
        read(r, "background", cfg.render.background, w);
    }
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": invalid JSON: " + e.what());
    }
    RunConfig cfg;
    try {
        apply_json(cfg, j);
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    if (!cfg.scene.empty() && cfg.scene.is_relative()) cfg.scene = path.parent_path() / cfg.scene;
    return cfg;
}

json to_json(const RunConfig& cfg) {
    const auto& t = cfg.train;
    json j;
    j["scene"] = cfg.scene.string();
    j["output_dir"] = cfg.output_dir.string();
    j["iterations"] = t.iterations;
    j["learning_rates"] = {{"position", t.lr.position}, {"position_final", t.lr.position_final}, {"scale", t.lr.scale},
                           {"rotation", t.lr.rotation}, {"opacity", t.lr.opacity},          {"sh0", t.lr.sh0},
                           {"sh_rest", t.lr.sh_rest}};
    j["spatial_lr_scale"] = t.spatial_lr_scale;
    j["lambda_ms"] = t.lambda_ms;
    j["lambda_rgb"] = t.lambda_rgb;
    j["conversion_stage"] = to_string(t.conversion_stage);
    j["loss_mode"] = to_string(t.loss_mode);
    j["dssim_weight"] = t.dssim_weight;
    j["densify"] = {{"enabled", t.densify.enabled},
                    {"interval", t.densify.interval},
                    {"grad_threshold", t.densify.grad_threshold},
                    {"opacity_prune_threshold", t.densify.opacity_prune_threshold},
                    {"scale_split_threshold", t.densify.scale_split_threshold},
                    {"start_iter", t.densify.start_iter},
                    {"stop_iter", t.densify.stop_iter}};
    j["seed"] = t.seed;
    j["apply_gamma"] = t.apply_gamma;
    j["apply_white_balance"] = t.apply_white_balance;
    j["opacity_reset"] = t.opacity_reset;
    j["opacity_reset_interval"] = t.opacity_reset_interval;
    j["eval_interval"] = t.eval_interval;
    j["checkpoint_interval"] = t.checkpoint_interval;
    j["sh_degree"] = cfg.sh_degree;
    j["bands"] = cfg.bands;
    j["threads"] = cfg.threads;
    json c;
    c["white_point"] = white_point_name(cfg.color.white_point);
    c["custom_white"] = cfg.color.custom_white;
    c["gamma_mode"] = cfg.color.gamma_mode == GammaMode::Srgb ? "srgb" : "power";
    c["gamma"] = cfg.color.gamma;
    c["xyz_to_linear_rgb"] = cfg.color.xyz_to_linear_rgb ? json(*cfg.color.xyz_to_linear_rgb) : json(nullptr);
    c["quadrature_weights"] = cfg.color.quadrature_weights;
    j["color"] = std::move(c);
    j["render"] = {{"alpha_min", cfg.render.alpha_min}, {"alpha_max", cfg.render.alpha_max},
                   {"t_min", cfg.render.t_min},         {"blur", cfg.render.blur},
                   {"tile_size", cfg.render.tile_size}, {"guard_band", cfg.render.guard_band},
                   {"background", cfg.render.background}};
    return j;
}

void validate(const RunConfig& cfg) {
    if (auto errs = validate_train_config(cfg.train); !errs.empty()) throw ConfigError(errs.front());
    validate_color_config(effective_color_config(cfg.train, cfg.color));
    if (cfg.sh_degree < 0 || cfg.sh_degree > kMaxShDegree) throw ConfigError("sh_degree must be in [0, 3]");
    if (cfg.threads < 0) throw ConfigError("threads must be nonnegative");
    const auto& r = cfg.render;
    if (!(r.alpha_min >= 0 && r.alpha_min < r.alpha_max && r.alpha_max <= 1))
        throw ConfigError("render: need 0 <= alpha_min < alpha_max <= 1");
    if (!(r.t_min >= 0 && r.t_min < 1)) throw ConfigError("render.t_min must be in [0, 1)");
    if (!(r.blur >= 0)) throw ConfigError("render.blur must be nonnegative");
    if (r.tile_size <= 0) throw ConfigError("render.tile_size must be positive");
    if (!(r.guard_band >= 0)) throw ConfigError("render.guard_band must be nonnegative");
}

}  // namespace msgs::cli

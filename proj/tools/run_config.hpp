#pragma once

// JSON run configuration shared by the CLI subcommands.

#include <filesystem>
#include <string>

#include "json.hpp"
#include "msgs/colorpipe.hpp"
#include "msgs/core.hpp"
#include "msgs/rasterizer.hpp"
#include "msgs/trainer.hpp"

namespace msgs::cli {

struct RunConfig {
    std::filesystem::path scene;   ///< manifest path
    std::filesystem::path output_dir;
    TrainConfig train;
    ColorPipeConfig color;
    RenderSettings render;
    int sh_degree = 3;
    std::string bands = "all";     ///< band mask, see parse_band_mask
    int threads = 0;
};

/// Fills `cfg` from `j`; keys not listed in docs/formats.md raise ConfigError.
void apply_json(RunConfig& cfg, const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Every field with defaults resolved.
nlohmann::json to_json(const RunConfig& cfg);

/// Effective TrainConfig / ColorPipeConfig / RenderSettings validated together.
void validate(const RunConfig& cfg);

}  // namespace msgs::cli

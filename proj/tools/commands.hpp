#pragma once

// Subcommand implementations. Each throws msgs::Error (or a subclass) on
// failure; main() turns that into a one-line diagnostic and exit code 1.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "msgs/synth.hpp"
#include "msgs/trainer.hpp"
#include "run_config.hpp"

namespace msgs::cli {

namespace fs = std::filesystem;

/// Flags that override the config file.
struct Overrides {
    std::optional<std::string> stage;
    std::optional<std::string> loss;
    std::optional<std::string> bands;
    std::optional<std::uint64_t> seed;
    std::optional<int> iterations;
    std::optional<int> threads;
};

struct TrainOptions {
    fs::path config;
    fs::path scene;
    fs::path out;
    Overrides overrides;
    bool quiet = false;
};
TrainReport run_train(const TrainOptions& opt, std::ostream& log);

struct SynthOptions {
    SynthConfig synth;
    fs::path config;  ///< optional run config supplying colour / render settings
    fs::path out;
    std::optional<int> threads;
};
void run_synth(const SynthOptions& opt, std::ostream& log);

struct RenderOptions {
    fs::path checkpoint;
    fs::path scene;       ///< cameras from a scene manifest ...
    fs::path transforms;  ///< ... or from a transforms.json
    int width = 0;
    int height = 0;
    bool spectral = false;
    bool rgb = false;
    fs::path config;
    fs::path out;
    Overrides overrides;
};
void run_render(const RenderOptions& opt, std::ostream& log);

struct ConvertOptions {
    fs::path cube;
    fs::path config;
    fs::path out;
    Overrides overrides;
};
void run_convert(const ConvertOptions& opt, std::ostream& log);

struct EvalOptions {
    fs::path checkpoint;
    fs::path scene;
    fs::path config;
    fs::path out;  ///< optional; metrics files are written here when set
    std::string split = "test";  ///< test | train | all
    Overrides overrides;
};
EvalMetrics run_eval(const EvalOptions& opt, std::ostream& log);

/// Human-readable metrics table.
void print_metrics(std::ostream& os, const EvalMetrics& m, const SpectralBasis& basis);
/// One line-delimited JSON record.
std::string metrics_record(const EvalMetrics& m, const SpectralBasis& basis);

}  // namespace msgs::cli

#pragma once

// Persistence and ingestion.
//
//   MSGS-CUBE/1   spectral cube: text header + float32 little-endian payload
//   MSGS-CLOUD/1  Gaussian cloud checkpoint: binary little-endian PLY
//   scene.json    manifest: basis, cameras, per-view files, split, points
//   PFM           float RGB / single-band images
//
// Byte-level layouts are documented in docs/formats.md.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msgs/colorpipe.hpp"
#include "msgs/core.hpp"

namespace msgs {

namespace fs = std::filesystem;

class FormatError : public Error {
public:
    using Error::Error;
};
class MagicMismatchError : public FormatError {
public:
    using FormatError::FormatError;
};
class TruncatedPayloadError : public FormatError {
public:
    TruncatedPayloadError(const std::string& what, std::uintmax_t expected, std::uintmax_t actual)
        : FormatError(what), expected_bytes(expected), actual_bytes(actual) {}
    std::uintmax_t expected_bytes;
    std::uintmax_t actual_bytes;
};
class WavelengthOrderError : public FormatError {
public:
    using FormatError::FormatError;
};
class BandCountMismatchError : public FormatError {
public:
    using FormatError::FormatError;
};
class MissingColorError : public FormatError {
public:
    using FormatError::FormatError;
};
class MissingFileError : public Error {
public:
    using Error::Error;
};

inline constexpr const char* kCubeMagic = "MSGS-CUBE/1";
inline constexpr const char* kCloudMagic = "MSGS-CLOUD/1";
inline constexpr const char* kSceneMagic = "MSGS-SCENE/1";

// ---------------------------------------------------------------------------
// Cubes and images
// ---------------------------------------------------------------------------

/// Values are stored as float32; float images round-trip bit-exactly.
template <typename T>
void save_cube(const fs::path& path, const SpectralImage<T>& image);
template <typename T>
SpectralImage<T> load_cube(const fs::path& path);

/// Portable float map: 3 channels ("PF") or 1 channel ("Pf").
template <typename T>
void save_pfm(const fs::path& path, std::span<const T> data, int height, int width, int channels);
struct PfmImage {
    int height = 0, width = 0, channels = 0;
    std::vector<float> data;  ///< top row first, interleaved
};
PfmImage load_pfm(const fs::path& path);

/// 8-bit binary PPM preview of an RGB image (values clamped to [0, 1]).
template <typename T>
void save_ppm(const fs::path& path, const RgbImage<T>& image);

/// Builds a cube from one single-channel PFM per band.
SpectralImage<float> import_band_stack(std::span<const fs::path> band_files, const SpectralBasis& basis);

// ---------------------------------------------------------------------------
// Clouds and points
// ---------------------------------------------------------------------------

/// float clouds are stored as PLY "float", double clouds as "double".
template <typename T>
void save_cloud(const fs::path& path, const GaussianCloud<T>& cloud);
template <typename T>
GaussianCloud<T> load_cloud(const fs::path& path);

/// Binary PLY with x, y, z and either spec_0..spec_{N-1} (float32) or red,
/// green, blue (uchar).
void save_points(const fs::path& path, std::span<const PointSample> points);

/// Reads a PLY point cloud (ascii or binary little-endian). RGB colours are
/// lifted to a flat spectrum over `basis` whose Y through `color` equals
/// the Y of the RGB colour; N-channel files must match the basis size.
std::vector<PointSample> ingest_points(const fs::path& path, const SpectralBasis& basis,
                                       const ColorPipeConfig& color = {});

/// Flat N-band spectrum with the luminance of an (encoded, per `color`) RGB triple.
std::vector<double> lift_rgb(const std::array<double, 3>& rgb, const ColorPipe& pipe);

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

/// Loads scene.json and everything it references (views in parallel).
Scene<float> load_scene(const fs::path& manifest_path, const ColorPipeConfig& color = {});

/// Writes manifest, cubes, optional RGB PFMs, points and cloud under `dir`.
void save_scene(const fs::path& dir, const Scene<float>& scene);

/// Cameras from a NeRF-style transforms.json (OpenGL camera axes, camera to
/// world matrices, horizontal field of view).
struct ImportedCamera {
    std::string file_path;
    Camera<float> camera;
};
std::vector<ImportedCamera> import_nvs_transforms(const fs::path& path, int width, int height);

// ---------------------------------------------------------------------------
// Band masks
// ---------------------------------------------------------------------------

/// Parses "all", "0,2,5", "1-15" (inclusive) or "nm:431-808".
std::vector<int> parse_band_mask(const std::string& spec, const SpectralBasis& basis);

template <typename T>
SpectralImage<T> select_bands(const SpectralImage<T>& image, std::span<const int> mask);
template <typename T>
GaussianCloud<T> select_bands(const GaussianCloud<T>& cloud, std::span<const int> mask);
/// Slices cubes, basis, point spectra and the attached cloud.
template <typename T>
Scene<T> select_bands(const Scene<T>& scene, std::span<const int> mask);

}  // namespace msgs

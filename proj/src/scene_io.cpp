#include "msgs/scene_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

#include "msgs/sh.hpp"

namespace msgs {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Byte helpers
// ---------------------------------------------------------------------------

template <typename V>
void put_le(std::string& buf, V value) {
    char bytes[sizeof(V)];
    std::memcpy(bytes, &value, sizeof(V));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(V));
    buf.append(bytes, sizeof(V));
}

template <typename V>
V get_le(const char* p) {
    char bytes[sizeof(V)];
    std::memcpy(bytes, p, sizeof(V));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(V));
    V v;
    std::memcpy(&v, bytes, sizeof(V));
    return v;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingFileError("cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + path.string());
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

/// Splits text header lines off `bytes` up to and including `terminator`.
/// Returns the payload offset.
std::size_t read_header(const std::string& bytes, const std::string& terminator, std::vector<std::string>& lines,
                        const fs::path& path) {
    std::size_t pos = 0;
    while (pos < bytes.size()) {
        const std::size_t nl = bytes.find('\n', pos);
        if (nl == std::string::npos) break;
        std::string line = bytes.substr(pos, nl - pos);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        pos = nl + 1;
        if (line == terminator) return pos;
        lines.push_back(std::move(line));
        if (lines.size() > 100000) break;
    }
    throw FormatError(path.string() + ": header is not terminated by '" + terminator + "'");
}

std::vector<double> parse_wavelengths(std::istringstream& is, const fs::path& path) {
    std::vector<double> w;
    double v;
    while (is >> v) w.push_back(v);
    if (!is.eof()) throw FormatError(path.string() + ": unparseable wavelength list");
    for (std::size_t i = 1; i < w.size(); ++i)
        if (!(w[i] > w[i - 1]))
            throw WavelengthOrderError(path.string() + ": wavelengths not strictly increasing at band " +
                                       std::to_string(i) + " (" + fmt_double(w[i - 1]) + " then " + fmt_double(w[i]) +
                                       " nm)");
    return w;
}

}  // namespace

// ---------------------------------------------------------------------------
// MSGS-CUBE/1
// ---------------------------------------------------------------------------

template <typename T>
void save_cube(const fs::path& path, const SpectralImage<T>& image) {
    const std::size_t n = static_cast<std::size_t>(image.height) * static_cast<std::size_t>(image.width) *
                          static_cast<std::size_t>(image.bands());
    if (image.data.size() != n) throw ContractViolation("save_cube: data size does not match H x W x N");
    std::string buf;
    buf += kCubeMagic;
    buf += "\nheight " + std::to_string(image.height);
    buf += "\nwidth " + std::to_string(image.width);
    buf += "\nbands " + std::to_string(image.bands());
    buf += "\nwavelengths";
    for (double w : image.basis.wavelengths_nm()) buf += " " + fmt_double(w);
    buf += "\ndtype float32\nbyteorder little\nend_header\n";
    buf.reserve(buf.size() + 4 * n);
    for (T v : image.data) put_le<float>(buf, static_cast<float>(v));
    write_file(path, buf);
}

template <typename T>
SpectralImage<T> load_cube(const fs::path& path) {
    const std::string bytes = read_file(path);
    const std::string magic(kCubeMagic);
    if (bytes.compare(0, magic.size(), magic) != 0 || bytes.size() <= magic.size() ||
        (bytes[magic.size()] != '\n' && bytes[magic.size()] != '\r'))
        throw MagicMismatchError(path.string() + ": not an " + magic + " file (magic mismatch)");
    std::vector<std::string> lines;
    const std::size_t payload = read_header(bytes, "end_header", lines, path);
    long long h = -1, w = -1, bands = -1;
    std::vector<double> wl;
    bool have_wl = false;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        std::istringstream is(lines[i]);
        std::string key;
        is >> key;
        if (key == "height") is >> h;
        else if (key == "width") is >> w;
        else if (key == "bands") is >> bands;
        else if (key == "wavelengths") wl = parse_wavelengths(is, path), have_wl = true;
        else if (key == "dtype") {
            std::string t;
            is >> t;
            if (t != "float32") throw FormatError(path.string() + ": unsupported dtype '" + t + "'");
        } else if (key == "byteorder") {
            std::string t;
            is >> t;
            if (t != "little") throw FormatError(path.string() + ": unsupported byte order '" + t + "'");
        } else if (key.empty() || key == "comment") {
            continue;
        } else {
            throw FormatError(path.string() + ": unknown header key '" + key + "'");
        }
    }
    if (h <= 0 || w <= 0 || bands <= 0 || !have_wl)
        throw FormatError(path.string() + ": header needs positive height, width, bands and a wavelength list");
    if (static_cast<long long>(wl.size()) != bands)
        throw BandCountMismatchError(path.string() + ": header declares " + std::to_string(bands) + " bands but lists " +
                                     std::to_string(wl.size()) + " wavelengths");
    SpectralImage<T> img(static_cast<int>(h), static_cast<int>(w), SpectralBasis(std::move(wl)));
    const std::uintmax_t expected = 4ull * img.data.size();
    const std::uintmax_t actual = bytes.size() - payload;
    if (actual < expected)
        throw TruncatedPayloadError(path.string() + ": truncated payload, expected " + std::to_string(expected) +
                                        " bytes, got " + std::to_string(actual),
                                    expected, actual);
    if (actual > expected)
        throw FormatError(path.string() + ": " + std::to_string(actual - expected) + " trailing bytes after payload");
    const char* p = bytes.data() + payload;
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<T>(get_le<float>(p + 4 * i));
    return img;
}

// ---------------------------------------------------------------------------
// PFM / PPM
// ---------------------------------------------------------------------------

template <typename T>
void save_pfm(const fs::path& path, std::span<const T> data, int height, int width, int channels) {
    if (channels != 1 && channels != 3) throw ContractViolation("save_pfm: channels must be 1 or 3");
    if (data.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width) * static_cast<std::size_t>(channels))
        throw ContractViolation("save_pfm: data size does not match H x W x C");
    std::string buf = channels == 3 ? "PF\n" : "Pf\n";
    buf += std::to_string(width) + " " + std::to_string(height) + "\n-1.0\n";
    for (int y = height - 1; y >= 0; --y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < channels; ++c)
                put_le<float>(buf, static_cast<float>(data[(static_cast<std::size_t>(y) * width + x) * channels + c]));
    write_file(path, buf);
}

PfmImage load_pfm(const fs::path& path) {
    const std::string bytes = read_file(path);
    std::istringstream is(bytes);
    std::string magic;
    double scale = 0;
    PfmImage img;
    is >> magic >> img.width >> img.height >> scale;
    if (magic != "PF" && magic != "Pf") throw MagicMismatchError(path.string() + ": not a PFM file (magic mismatch)");
    if (!is || img.width <= 0 || img.height <= 0 || scale == 0) throw FormatError(path.string() + ": bad PFM header");
    is.get();  // single whitespace before the raster
    img.channels = magic == "PF" ? 3 : 1;
    const std::size_t offset = static_cast<std::size_t>(is.tellg());
    const std::size_t n = static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height) *
                          static_cast<std::size_t>(img.channels);
    if (bytes.size() - offset < 4 * n)
        throw TruncatedPayloadError(path.string() + ": truncated payload, expected " + std::to_string(4 * n) +
                                        " bytes, got " + std::to_string(bytes.size() - offset),
                                    4 * n, bytes.size() - offset);
    img.data.resize(n);
    const bool little = scale < 0;
    const char* p = bytes.data() + offset;
    const std::size_t row = static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.channels);
    for (int y = 0; y < img.height; ++y) {
        const std::size_t dst = static_cast<std::size_t>(img.height - 1 - y) * row;
        for (std::size_t k = 0; k < row; ++k) {
            const char* src = p + 4 * (static_cast<std::size_t>(y) * row + k);
            if (little) {
                img.data[dst + k] = get_le<float>(src);
            } else {
                char b[4] = {src[3], src[2], src[1], src[0]};
                img.data[dst + k] = get_le<float>(b);
            }
        }
    }
    return img;
}

template <typename T>
void save_ppm(const fs::path& path, const RgbImage<T>& image) {
    std::string buf = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
    for (T v : image.data) {
        const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
        buf.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
    }
    write_file(path, buf);
}

SpectralImage<float> import_band_stack(std::span<const fs::path> band_files, const SpectralBasis& basis) {
    if (static_cast<int>(band_files.size()) != basis.band_count())
        throw BandCountMismatchError("band stack has " + std::to_string(band_files.size()) + " files but the basis has " +
                                     std::to_string(basis.band_count()) + " bands");
    SpectralImage<float> cube;
    for (std::size_t b = 0; b < band_files.size(); ++b) {
        const auto pfm = load_pfm(band_files[b]);
        if (pfm.channels != 1) throw FormatError(band_files[b].string() + ": band images must be single-channel PFM");
        if (b == 0) cube = SpectralImage<float>(pfm.height, pfm.width, basis);
        if (pfm.height != cube.height || pfm.width != cube.width)
            throw FormatError(band_files[b].string() + ": band image size differs from band 0");
        for (int y = 0; y < cube.height; ++y)
            for (int x = 0; x < cube.width; ++x)
                cube.at(y, x, static_cast<int>(b)) = pfm.data[static_cast<std::size_t>(y) * cube.width + x];
    }
    return cube;
}

// ---------------------------------------------------------------------------
// PLY
// ---------------------------------------------------------------------------

namespace {

struct PlyProperty {
    std::string name;
    std::string type;
    bool is_list = false;
    std::string count_type;
};

struct PlyElement {
    std::string name;
    std::size_t count = 0;
    std::vector<PlyProperty> props;
};

struct Ply {
    bool binary = true;
    std::vector<std::string> comments;
    std::vector<PlyElement> elements;
    std::vector<std::vector<double>> vertex;  ///< one column per vertex property

    [[nodiscard]] const PlyElement* vertex_element() const {
        for (const auto& e : elements)
            if (e.name == "vertex") return &e;
        return nullptr;
    }
    [[nodiscard]] int column(const std::string& name) const {
        const auto* v = vertex_element();
        for (std::size_t i = 0; v && i < v->props.size(); ++i)
            if (v->props[i].name == name) return static_cast<int>(i);
        return -1;
    }
};

std::size_t ply_type_size(const std::string& t, const fs::path& path) {
    if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
    if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
    if (t == "int" || t == "uint" || t == "int32" || t == "uint32" || t == "float" || t == "float32") return 4;
    if (t == "double" || t == "float64") return 8;
    throw FormatError(path.string() + ": unknown PLY property type '" + t + "'");
}

double ply_read_value(const char* p, const std::string& t) {
    if (t == "char" || t == "int8") return get_le<std::int8_t>(p);
    if (t == "uchar" || t == "uint8") return get_le<std::uint8_t>(p);
    if (t == "short" || t == "int16") return get_le<std::int16_t>(p);
    if (t == "ushort" || t == "uint16") return get_le<std::uint16_t>(p);
    if (t == "int" || t == "int32") return get_le<std::int32_t>(p);
    if (t == "uint" || t == "uint32") return get_le<std::uint32_t>(p);
    if (t == "float" || t == "float32") return get_le<float>(p);
    return get_le<double>(p);
}

Ply read_ply(const fs::path& path) {
    const std::string bytes = read_file(path);
    if (bytes.compare(0, 4, "ply\n") != 0 && bytes.compare(0, 5, "ply\r\n") != 0)
        throw MagicMismatchError(path.string() + ": not a PLY file (magic mismatch)");
    std::vector<std::string> lines;
    const std::size_t payload = read_header(bytes, "end_header", lines, path);
    Ply ply;
    bool have_format = false;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        std::istringstream is(lines[i]);
        std::string key;
        is >> key;
        if (key == "format") {
            std::string f;
            is >> f;
            if (f == "ascii") ply.binary = false;
            else if (f == "binary_little_endian") ply.binary = true;
            else throw FormatError(path.string() + ": unsupported PLY format '" + f + "'");
            have_format = true;
        } else if (key == "comment" || key == "obj_info") {
            std::string rest;
            std::getline(is >> std::ws, rest);
            ply.comments.push_back(rest);
        } else if (key == "element") {
            PlyElement e;
            is >> e.name >> e.count;
            if (!is) throw FormatError(path.string() + ": bad element line '" + lines[i] + "'");
            ply.elements.push_back(std::move(e));
        } else if (key == "property") {
            if (ply.elements.empty()) throw FormatError(path.string() + ": property before any element");
            PlyProperty p;
            std::string t;
            is >> t;
            if (t == "list") {
                p.is_list = true;
                is >> p.count_type >> p.type >> p.name;
            } else {
                p.type = t;
                is >> p.name;
            }
            if (!is) throw FormatError(path.string() + ": bad property line '" + lines[i] + "'");
            ply_type_size(p.type, path);
            ply.elements.back().props.push_back(std::move(p));
        } else if (!key.empty()) {
            throw FormatError(path.string() + ": unknown PLY header keyword '" + key + "'");
        }
    }
    if (!have_format) throw FormatError(path.string() + ": PLY header has no format line");
    const PlyElement* vert = ply.vertex_element();
    if (!vert) throw FormatError(path.string() + ": PLY file has no vertex element");
    for (const auto& p : vert->props)
        if (p.is_list) throw FormatError(path.string() + ": list property '" + p.name + "' on vertex element");
    ply.vertex.assign(vert->props.size(), std::vector<double>(vert->count));

    if (ply.binary) {
        std::size_t pos = payload;
        auto need = [&](std::size_t k) {
            if (pos + k > bytes.size()) {
                throw TruncatedPayloadError(path.string() + ": truncated payload at byte " + std::to_string(pos) +
                                                ", file has " + std::to_string(bytes.size()) + " bytes",
                                            pos + k, bytes.size());
            }
        };
        for (const auto& e : ply.elements) {
            const bool is_vertex = &e == vert;
            for (std::size_t r = 0; r < e.count; ++r) {
                for (std::size_t c = 0; c < e.props.size(); ++c) {
                    const auto& p = e.props[c];
                    if (p.is_list) {
                        const std::size_t cs = ply_type_size(p.count_type, path);
                        need(cs);
                        const auto len = static_cast<std::size_t>(ply_read_value(bytes.data() + pos, p.count_type));
                        pos += cs;
                        need(len * ply_type_size(p.type, path));
                        pos += len * ply_type_size(p.type, path);
                        continue;
                    }
                    const std::size_t s = ply_type_size(p.type, path);
                    need(s);
                    if (is_vertex) ply.vertex[c][r] = ply_read_value(bytes.data() + pos, p.type);
                    pos += s;
                }
            }
            if (is_vertex) break;
        }
    } else {
        std::istringstream is(bytes.substr(payload));
        for (const auto& e : ply.elements) {
            const bool is_vertex = &e == vert;
            for (std::size_t r = 0; r < e.count; ++r) {
                for (std::size_t c = 0; c < e.props.size(); ++c) {
                    const auto& p = e.props[c];
                    double v = 0;
                    if (p.is_list) {
                        std::size_t len = 0;
                        is >> len;
                        for (std::size_t k = 0; k < len; ++k) is >> v;
                    } else {
                        is >> v;
                        if (is_vertex) ply.vertex[c][r] = v;
                    }
                    if (!is) throw FormatError(path.string() + ": unparseable ASCII PLY body at element '" + e.name + "'");
                }
            }
            if (is_vertex) break;
        }
    }
    return ply;
}

}  // namespace

// ---------------------------------------------------------------------------
// MSGS-CLOUD/1
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> cloud_property_names(int bands, int coeffs) {
    std::vector<std::string> names{"x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
                                   "opacity"};
    for (int b = 0; b < bands; ++b)
        for (int k = 0; k < coeffs; ++k) names.push_back("sh_" + std::to_string(b) + "_" + std::to_string(k));
    return names;
}

}  // namespace

template <typename T>
void save_cloud(const fs::path& path, const GaussianCloud<T>& cloud) {
    if (auto errs = validate_cloud(cloud); !errs.empty()) throw ContractViolation("save_cloud: " + errs.front());
    const std::string type = std::is_same_v<T, double> ? "double" : "float";
    std::string buf = "ply\nformat binary_little_endian 1.0\ncomment ";
    buf += kCloudMagic;
    buf += "\ncomment sh_degree " + std::to_string(cloud.sh_degree);
    buf += "\ncomment wavelengths";
    for (double w : cloud.basis.wavelengths_nm()) buf += " " + fmt_double(w);
    buf += "\nelement vertex " + std::to_string(cloud.size()) + "\n";
    for (const auto& name : cloud_property_names(cloud.bands(), cloud.coeffs_per_band()))
        buf += "property " + type + " " + name + "\n";
    buf += "end_header\n";
    const std::size_t stride = cloud.sh_stride();
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        for (int c = 0; c < 3; ++c) put_le<T>(buf, cloud.positions[3 * i + static_cast<std::size_t>(c)]);
        for (int c = 0; c < 3; ++c) put_le<T>(buf, cloud.log_scales[3 * i + static_cast<std::size_t>(c)]);
        for (int c = 0; c < 4; ++c) put_le<T>(buf, cloud.rotations[4 * i + static_cast<std::size_t>(c)]);
        put_le<T>(buf, cloud.opacity_logits[i]);
        for (std::size_t k = 0; k < stride; ++k) put_le<T>(buf, cloud.sh_coeffs[i * stride + k]);
    }
    write_file(path, buf);
}

template <typename T>
GaussianCloud<T> load_cloud(const fs::path& path) {
    const Ply ply = read_ply(path);
    if (ply.comments.empty() || ply.comments[0] != kCloudMagic)
        throw MagicMismatchError(path.string() + ": PLY file is not an " + std::string(kCloudMagic) +
                                 " checkpoint (magic mismatch)");
    int degree = -1;
    std::vector<double> wl;
    for (const auto& c : ply.comments) {
        std::istringstream is(c);
        std::string key;
        is >> key;
        if (key == "sh_degree") is >> degree;
        else if (key == "wavelengths") wl = parse_wavelengths(is, path);
    }
    if (degree < 0 || degree > kMaxShDegree) throw FormatError(path.string() + ": missing or invalid sh_degree");
    if (wl.empty()) throw FormatError(path.string() + ": missing wavelengths comment");
    SpectralBasis basis(std::move(wl));
    const auto names = cloud_property_names(basis.band_count(), sh_coeff_count(degree));
    const auto* vert = ply.vertex_element();
    std::size_t sh_props = 0;
    for (const auto& p : vert->props) sh_props += p.name.rfind("sh_", 0) == 0;
    if (sh_props != names.size() - 11)
        throw BandCountMismatchError(path.string() + ": " + std::to_string(sh_props) +
                                     " SH properties, expected " + std::to_string(names.size() - 11) + " for " +
                                     std::to_string(basis.band_count()) + " bands at degree " + std::to_string(degree));
    std::vector<int> cols;
    for (const auto& n : names) {
        const int c = ply.column(n);
        if (c < 0) throw FormatError(path.string() + ": missing property '" + n + "'");
        cols.push_back(c);
    }
    const std::size_t n = vert->count;
    GaussianCloud<T> cloud(basis, degree, n);
    const std::size_t stride = cloud.sh_stride();
    auto col = [&](std::size_t k, std::size_t i) { return static_cast<T>(ply.vertex[static_cast<std::size_t>(cols[k])][i]); };
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < 3; ++c) cloud.positions[3 * i + c] = col(c, i);
        for (std::size_t c = 0; c < 3; ++c) cloud.log_scales[3 * i + c] = col(3 + c, i);
        for (std::size_t c = 0; c < 4; ++c) cloud.rotations[4 * i + c] = col(6 + c, i);
        cloud.opacity_logits[i] = col(10, i);
        for (std::size_t k = 0; k < stride; ++k) cloud.sh_coeffs[i * stride + k] = col(11 + k, i);
    }
    return cloud;
}

// ---------------------------------------------------------------------------
// Points
// ---------------------------------------------------------------------------

void save_points(const fs::path& path, std::span<const PointSample> points) {
    std::size_t n_spec = points.empty() ? 0 : points[0].spectrum.size();
    for (const auto& p : points)
        if (p.spectrum.size() != n_spec) throw ContractViolation("save_points: points have differing spectrum lengths");
    std::string buf = "ply\nformat binary_little_endian 1.0\nelement vertex " + std::to_string(points.size()) +
                      "\nproperty float x\nproperty float y\nproperty float z\n";
    for (std::size_t b = 0; b < n_spec; ++b) buf += "property float spec_" + std::to_string(b) + "\n";
    buf += "end_header\n";
    for (const auto& p : points) {
        for (double v : p.position) put_le<float>(buf, static_cast<float>(v));
        for (double v : p.spectrum) put_le<float>(buf, static_cast<float>(v));
    }
    write_file(path, buf);
}

namespace {

double decode_channel(double v, const ColorPipeConfig& cfg) {
    if (!cfg.apply_gamma) return v;
    if (cfg.gamma_mode == GammaMode::Srgb)
        return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
    return v > 0 ? std::pow(v, cfg.gamma) : 0.0;
}

std::array<double, 3> solve3(const Mat3d& m, const std::array<double, 3>& b) {
    const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                       m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                       m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    std::array<double, 3> x{};
    for (int c = 0; c < 3; ++c) {
        Mat3d mc = m;
        for (int r = 0; r < 3; ++r) mc[r][c] = b[static_cast<std::size_t>(r)];
        x[static_cast<std::size_t>(c)] = (mc[0][0] * (mc[1][1] * mc[2][2] - mc[1][2] * mc[2][1]) -
                                          mc[0][1] * (mc[1][0] * mc[2][2] - mc[1][2] * mc[2][0]) +
                                          mc[0][2] * (mc[1][0] * mc[2][1] - mc[1][1] * mc[2][0])) /
                                         det;
    }
    return x;
}

}  // namespace

std::vector<double> lift_rgb(const std::array<double, 3>& rgb, const ColorPipe& pipe) {
    const auto& cfg = pipe.config();
    std::array<double, 3> lin{};
    for (int c = 0; c < 3; ++c) lin[static_cast<std::size_t>(c)] = decode_channel(rgb[static_cast<std::size_t>(c)], cfg);
    // white balance leaves Y untouched, so the target Y is the matrix preimage's Y
    const auto xyz = solve3(pipe.matrix(), lin);
    const double y_target = std::max(0.0, xyz[1] / pipe.wb_scale()[1]);
    double y_flat = 0;
    for (double v : pipe.cmf().y) y_flat += v;
    const double level = y_flat > 1e-12 ? y_target / y_flat : y_target;
    return std::vector<double>(static_cast<std::size_t>(pipe.cmf().bands()), level);
}

std::vector<PointSample> ingest_points(const fs::path& path, const SpectralBasis& basis, const ColorPipeConfig& color) {
    const Ply ply = read_ply(path);
    const int cx = ply.column("x"), cy = ply.column("y"), cz = ply.column("z");
    if (cx < 0 || cy < 0 || cz < 0) throw FormatError(path.string() + ": missing position properties x, y, z");
    std::vector<int> spec_cols;
    for (int b = 0;; ++b) {
        const int c = ply.column("spec_" + std::to_string(b));
        if (c < 0) break;
        spec_cols.push_back(c);
    }
    std::array<int, 3> rgb_cols{ply.column("red"), ply.column("green"), ply.column("blue")};
    const bool has_rgb = rgb_cols[0] >= 0 && rgb_cols[1] >= 0 && rgb_cols[2] >= 0;
    if (spec_cols.empty() && !has_rgb) throw MissingColorError(path.string() + ": missing color properties");
    if (!spec_cols.empty() && static_cast<int>(spec_cols.size()) != basis.band_count())
        throw BandCountMismatchError(path.string() + ": " + std::to_string(spec_cols.size()) +
                                     "-channel points under a " + std::to_string(basis.band_count()) + "-band basis");

    const auto* vert = ply.vertex_element();
    double rgb_scale = 1.0;
    if (spec_cols.empty()) {
        const auto& t = vert->props[static_cast<std::size_t>(rgb_cols[0])].type;
        if (t == "uchar" || t == "uint8") rgb_scale = 1.0 / 255.0;
        else if (t == "ushort" || t == "uint16") rgb_scale = 1.0 / 65535.0;
    }
    std::optional<ColorPipe> pipe;
    if (spec_cols.empty()) pipe.emplace(basis, color);

    std::vector<PointSample> out(vert->count);
    for (std::size_t i = 0; i < vert->count; ++i) {
        auto& p = out[i];
        p.position = {ply.vertex[static_cast<std::size_t>(cx)][i], ply.vertex[static_cast<std::size_t>(cy)][i],
                      ply.vertex[static_cast<std::size_t>(cz)][i]};
        if (!spec_cols.empty()) {
            p.spectrum.reserve(spec_cols.size());
            for (int c : spec_cols) p.spectrum.push_back(ply.vertex[static_cast<std::size_t>(c)][i]);
        } else {
            std::array<double, 3> rgb{};
            for (int c = 0; c < 3; ++c)
                rgb[static_cast<std::size_t>(c)] =
                    ply.vertex[static_cast<std::size_t>(rgb_cols[static_cast<std::size_t>(c)])][i] * rgb_scale;
            p.spectrum = lift_rgb(rgb, *pipe);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scene manifest
// ---------------------------------------------------------------------------

namespace {

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || it.key() == a;
        if (!ok) throw FormatError(where + ": unknown key '" + it.key() + "'");
    }
}

json camera_to_json(const Camera<float>& cam) {
    json j;
    j["width"] = cam.width;
    j["height"] = cam.height;
    j["fx"] = cam.fx;
    j["fy"] = cam.fy;
    j["cx"] = cam.cx;
    j["cy"] = cam.cy;
    j["near"] = cam.near_plane;
    j["far"] = cam.far_plane;
    j["world_to_camera"] = cam.world_to_camera;
    return j;
}

Camera<float> camera_from_json(const json& j, const std::string& where) {
    reject_unknown(j, {"width", "height", "fx", "fy", "cx", "cy", "near", "far", "world_to_camera"}, where);
    Camera<float> cam;
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    cam.fx = j.at("fx").get<float>();
    cam.fy = j.at("fy").get<float>();
    cam.cx = j.at("cx").get<float>();
    cam.cy = j.at("cy").get<float>();
    if (j.contains("near")) cam.near_plane = j["near"].get<float>();
    if (j.contains("far")) cam.far_plane = j["far"].get<float>();
    const auto m = j.at("world_to_camera").get<std::vector<float>>();
    if (m.size() != 16) throw FormatError(where + ": world_to_camera needs 16 values");
    std::copy(m.begin(), m.end(), cam.world_to_camera.begin());
    if (auto errs = validate_camera(cam); !errs.empty()) throw FormatError(where + ": " + errs.front());
    return cam;
}

}  // namespace

Scene<float> load_scene(const fs::path& manifest_path, const ColorPipeConfig& color) {
    const std::string text = read_file(manifest_path);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(manifest_path.string() + ": invalid JSON: " + e.what());
    }
    const fs::path dir = manifest_path.parent_path();
    const std::string where = manifest_path.string();
    try {
        reject_unknown(j, {"format", "wavelengths_nm", "views", "points", "cloud"}, where);
        if (j.value("format", std::string()) != kSceneMagic)
            throw MagicMismatchError(where + ": manifest format is not " + std::string(kSceneMagic) + " (magic mismatch)");
        const auto wl = j.at("wavelengths_nm").get<std::vector<double>>();
        for (std::size_t i = 1; i < wl.size(); ++i)
            if (!(wl[i] > wl[i - 1]))
                throw WavelengthOrderError(where + ": wavelengths not strictly increasing at band " + std::to_string(i));
        Scene<float> scene;
        scene.basis = SpectralBasis(wl);

        const auto& views = j.at("views");
        if (!views.is_array() || views.empty()) throw FormatError(where + ": 'views' must be a nonempty array");
        scene.views.resize(views.size());
        struct ViewFiles {
            fs::path cube, rgb;
            ColorSpace rgb_space = ColorSpace::EncodedRGB;
        };
        std::vector<ViewFiles> files(views.size());
        for (std::size_t i = 0; i < views.size(); ++i) {
            const auto& v = views[i];
            const std::string vw = where + ": views[" + std::to_string(i) + "]";
            reject_unknown(v, {"name", "split", "cube", "rgb", "rgb_space", "camera"}, vw);
            auto& view = scene.views[i];
            view.name = v.value("name", "view_" + std::to_string(i));
            const std::string split = v.value("split", std::string("train"));
            if (split != "train" && split != "test") throw FormatError(vw + ": split must be 'train' or 'test'");
            view.test = split == "test";
            view.camera = camera_from_json(v.at("camera"), vw + ".camera");
            files[i].cube = dir / v.at("cube").get<std::string>();
            if (!fs::exists(files[i].cube)) throw MissingFileError(vw + ": missing cube file " + files[i].cube.string());
            if (v.contains("rgb")) {
                files[i].rgb = dir / v["rgb"].get<std::string>();
                if (!fs::exists(files[i].rgb)) throw MissingFileError(vw + ": missing RGB file " + files[i].rgb.string());
                const std::string space = v.value("rgb_space", std::string("encoded"));
                if (space != "encoded" && space != "linear") throw FormatError(vw + ": rgb_space must be encoded or linear");
                files[i].rgb_space = space == "linear" ? ColorSpace::LinearRGB : ColorSpace::EncodedRGB;
            }
        }

        std::vector<std::exception_ptr> errors(views.size());
#pragma omp parallel for schedule(dynamic)
        for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(views.size()); ++ii) {
            const auto i = static_cast<std::size_t>(ii);
            try {
                auto& view = scene.views[i];
                view.spectral = load_cube<float>(files[i].cube);
                const auto& cube = view.spectral;
                if (cube.bands() != scene.basis.band_count())
                    throw BandCountMismatchError(files[i].cube.string() + ": cube has " + std::to_string(cube.bands()) +
                                                 " bands but the manifest declares " +
                                                 std::to_string(scene.basis.band_count()));
                if (cube.basis != scene.basis)
                    throw FormatError(files[i].cube.string() + ": cube wavelengths differ from the manifest");
                if (cube.height != view.camera.height || cube.width != view.camera.width)
                    throw FormatError(files[i].cube.string() + ": cube size differs from its camera");
                if (!files[i].rgb.empty()) {
                    const auto pfm = load_pfm(files[i].rgb);
                    if (pfm.channels != 3 || pfm.height != cube.height || pfm.width != cube.width)
                        throw FormatError(files[i].rgb.string() + ": RGB image must be 3-channel and match the cube size");
                    RgbImage<float> rgb(pfm.height, pfm.width, files[i].rgb_space);
                    rgb.data = pfm.data;
                    view.rgb = std::move(rgb);
                }
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);

        if (j.contains("points")) {
            const fs::path p = dir / j["points"].get<std::string>();
            if (!fs::exists(p)) throw MissingFileError(where + ": missing points file " + p.string());
            scene.points = ingest_points(p, scene.basis, color);
        }
        if (j.contains("cloud")) {
            const fs::path p = dir / j["cloud"].get<std::string>();
            if (!fs::exists(p)) throw MissingFileError(where + ": missing cloud file " + p.string());
            scene.cloud = load_cloud<float>(p);
            if (scene.cloud->basis != scene.basis) throw BandCountMismatchError(p.string() + ": cloud basis differs from the manifest");
        }
        return scene;
    } catch (const json::exception& e) {
        throw FormatError(where + ": " + e.what());
    }
}

void save_scene(const fs::path& dir, const Scene<float>& scene) {
    fs::create_directories(dir / "views");
    json j;
    j["format"] = kSceneMagic;
    j["wavelengths_nm"] = scene.basis.wavelengths_nm();
    json views = json::array();
    std::set<std::string> names;
    for (std::size_t i = 0; i < scene.views.size(); ++i) {
        const auto& v = scene.views[i];
        std::string name = v.name.empty() ? "view_" + std::to_string(i) : v.name;
        if (!names.insert(name).second) throw ContractViolation("save_scene: duplicate view name '" + name + "'");
        json jv;
        jv["name"] = name;
        jv["split"] = v.test ? "test" : "train";
        jv["camera"] = camera_to_json(v.camera);
        const std::string cube = "views/" + name + ".cube";
        save_cube(dir / cube, v.spectral);
        jv["cube"] = cube;
        if (v.rgb) {
            const std::string rgb = "views/" + name + ".rgb.pfm";
            save_pfm<float>(dir / rgb, v.rgb->data, v.rgb->height, v.rgb->width, 3);
            jv["rgb"] = rgb;
            jv["rgb_space"] = v.rgb->color_space == ColorSpace::LinearRGB ? "linear" : "encoded";
        }
        views.push_back(std::move(jv));
    }
    j["views"] = std::move(views);
    if (!scene.points.empty()) {
        save_points(dir / "points.ply", scene.points);
        j["points"] = "points.ply";
    }
    if (scene.cloud) {
        save_cloud(dir / "init_cloud.ply", *scene.cloud);
        j["cloud"] = "init_cloud.ply";
    }
    write_file(dir / "scene.json", j.dump(2) + "\n");
}

std::vector<ImportedCamera> import_nvs_transforms(const fs::path& path, int width, int height) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": invalid JSON: " + e.what());
    }
    try {
        const int w = j.value("w", width), h = j.value("h", height);
        if (w <= 0 || h <= 0) throw FormatError(path.string() + ": image size unknown; pass width and height");
        double fx, fy;
        if (j.contains("fl_x")) {
            fx = j["fl_x"].get<double>();
            fy = j.value("fl_y", fx);
        } else {
            const double ax = j.at("camera_angle_x").get<double>();
            fx = 0.5 * w / std::tan(0.5 * ax);
            fy = j.contains("camera_angle_y") ? 0.5 * h / std::tan(0.5 * j["camera_angle_y"].get<double>()) : fx;
        }
        // pixel-edge principal point -> pixel-centre coordinates
        const double cx = j.value("cx", 0.5 * w) - 0.5;
        const double cy = j.value("cy", 0.5 * h) - 0.5;
        std::vector<ImportedCamera> out;
        for (const auto& f : j.at("frames")) {
            const auto m = f.at("transform_matrix").get<std::vector<std::vector<double>>>();
            if (m.size() < 3 || m[0].size() != 4 || m[1].size() != 4 || m[2].size() != 4)
                throw FormatError(path.string() + ": transform_matrix must be 4x4");
            // OpenGL camera (x right, y up, z back) -> x right, y down, z forward
            double r[3][3], t[3];
            for (int a = 0; a < 3; ++a) {
                r[a][0] = m[static_cast<std::size_t>(a)][0];
                r[a][1] = -m[static_cast<std::size_t>(a)][1];
                r[a][2] = -m[static_cast<std::size_t>(a)][2];
                t[a] = m[static_cast<std::size_t>(a)][3];
            }
            Camera<float> cam;
            cam.width = w;
            cam.height = h;
            cam.fx = static_cast<float>(fx);
            cam.fy = static_cast<float>(fy);
            cam.cx = static_cast<float>(cx);
            cam.cy = static_cast<float>(cy);
            for (int a = 0; a < 3; ++a) {
                double tt = 0;
                for (int b = 0; b < 3; ++b) {
                    cam.world_to_camera[static_cast<std::size_t>(a * 4 + b)] = static_cast<float>(r[b][a]);
                    tt -= r[b][a] * t[b];
                }
                cam.world_to_camera[static_cast<std::size_t>(a * 4 + 3)] = static_cast<float>(tt);
            }
            out.push_back({f.value("file_path", std::string()), cam});
        }
        return out;
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Band masks
// ---------------------------------------------------------------------------

std::vector<int> parse_band_mask(const std::string& spec, const SpectralBasis& basis) {
    const int n = basis.band_count();
    std::vector<int> mask;
    if (spec == "all") {
        for (int b = 0; b < n; ++b) mask.push_back(b);
        return mask;
    }
    if (spec.rfind("nm:", 0) == 0) {
        double lo = 0, hi = 0;
        char dash = 0;
        std::istringstream is(spec.substr(3));
        is >> lo >> dash >> hi;
        if (!is || dash != '-') throw ConfigError("band mask '" + spec + "': expected nm:<low>-<high>");
        for (int b = 0; b < n; ++b)
            if (basis[b] >= lo - 0.5 && basis[b] <= hi + 0.5) mask.push_back(b);
        if (mask.empty()) throw ConfigError("band mask '" + spec + "' selects no bands");
        return mask;
    }
    std::set<int> picked;
    std::istringstream is(spec);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        if (tok.empty()) continue;
        int a = 0, b = 0;
        const auto dash = tok.find('-');
        try {
            if (dash == std::string::npos) {
                a = b = std::stoi(tok);
            } else {
                a = std::stoi(tok.substr(0, dash));
                b = std::stoi(tok.substr(dash + 1));
            }
        } catch (const std::exception&) {
            throw ConfigError("band mask '" + spec + "': bad token '" + tok + "'");
        }
        if (a > b || a < 0 || b >= n)
            throw ConfigError("band mask '" + spec + "': range " + tok + " outside [0, " + std::to_string(n - 1) + "]");
        for (int k = a; k <= b; ++k) picked.insert(k);
    }
    if (picked.empty()) throw ConfigError("band mask '" + spec + "' selects no bands");
    return {picked.begin(), picked.end()};
}

namespace {

void check_mask(std::span<const int> mask, int bands) {
    if (mask.empty()) throw ContractViolation("select_bands: empty band mask");
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] < 0 || mask[i] >= bands)
            throw ContractViolation("select_bands: band index " + std::to_string(mask[i]) + " out of range");
        if (i > 0 && mask[i] <= mask[i - 1]) throw ContractViolation("select_bands: mask must be strictly increasing");
    }
}

}  // namespace

template <typename T>
SpectralImage<T> select_bands(const SpectralImage<T>& image, std::span<const int> mask) {
    check_mask(mask, image.bands());
    SpectralImage<T> out(image.height, image.width, image.basis.select(mask));
    const std::size_t m = mask.size();
    const std::size_t pixels = static_cast<std::size_t>(image.height) * static_cast<std::size_t>(image.width);
    const std::size_t n = static_cast<std::size_t>(image.bands());
    for (std::size_t p = 0; p < pixels; ++p)
        for (std::size_t k = 0; k < m; ++k) out.data[p * m + k] = image.data[p * n + static_cast<std::size_t>(mask[k])];
    return out;
}

template <typename T>
GaussianCloud<T> select_bands(const GaussianCloud<T>& cloud, std::span<const int> mask) {
    check_mask(mask, cloud.bands());
    GaussianCloud<T> out(cloud.basis.select(mask), cloud.sh_degree, cloud.size());
    out.positions = cloud.positions;
    out.log_scales = cloud.log_scales;
    out.rotations = cloud.rotations;
    out.opacity_logits = cloud.opacity_logits;
    const std::size_t k = static_cast<std::size_t>(cloud.coeffs_per_band());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const auto src = cloud.sh_of(i);
        auto dst = out.sh_of(i);
        for (std::size_t j = 0; j < mask.size(); ++j)
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(mask[j]) * k), k,
                        dst.begin() + static_cast<std::ptrdiff_t>(j * k));
    }
    return out;
}

template <typename T>
Scene<T> select_bands(const Scene<T>& scene, std::span<const int> mask) {
    check_mask(mask, scene.basis.band_count());
    Scene<T> out;
    out.basis = scene.basis.select(mask);
    out.views.reserve(scene.views.size());
    for (const auto& v : scene.views) {
        View<T> nv{v.name, v.camera, select_bands(v.spectral, mask), v.rgb, v.test};
        out.views.push_back(std::move(nv));
    }
    out.points.reserve(scene.points.size());
    for (const auto& p : scene.points) {
        PointSample q{p.position, {}};
        for (int b : mask) q.spectrum.push_back(p.spectrum.at(static_cast<std::size_t>(b)));
        out.points.push_back(std::move(q));
    }
    if (scene.cloud) out.cloud = select_bands(*scene.cloud, mask);
    return out;
}

#define MSGS_INSTANTIATE_IO(T)                                                                      \
    template void save_cube<T>(const fs::path&, const SpectralImage<T>&);                           \
    template SpectralImage<T> load_cube<T>(const fs::path&);                                        \
    template void save_pfm<T>(const fs::path&, std::span<const T>, int, int, int);                  \
    template void save_ppm<T>(const fs::path&, const RgbImage<T>&);                                 \
    template void save_cloud<T>(const fs::path&, const GaussianCloud<T>&);                          \
    template GaussianCloud<T> load_cloud<T>(const fs::path&);                                       \
    template SpectralImage<T> select_bands<T>(const SpectralImage<T>&, std::span<const int>);       \
    template GaussianCloud<T> select_bands<T>(const GaussianCloud<T>&, std::span<const int>);       \
    template Scene<T> select_bands<T>(const Scene<T>&, std::span<const int>);

MSGS_INSTANTIATE_IO(float)
MSGS_INSTANTIATE_IO(double)

}  // namespace msgs

#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "msgs/colorpipe.hpp"
#include "msgs/synth.hpp"
#include "support.hpp"

using namespace msgs;

namespace {

struct CmfRow {
    double x, y, z;
};

std::vector<CmfRow> read_data_file() {
    std::ifstream in(std::string(MSGS_SOURCE_DIR) + "/data/cie1931_2deg_1nm.txt");
    REQUIRE(in.good());
    std::vector<CmfRow> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string a, b, c;
        ls >> a >> b >> c;
        rows.push_back({std::strtod(a.c_str(), nullptr), std::strtod(b.c_str(), nullptr), std::strtod(c.c_str(), nullptr)});
    }
    return rows;
}

double srgb_encode(double v) { return v <= 0.0031308 ? 12.92 * v : 1.055 * std::pow(v, 1 / 2.4) - 0.055; }

ColorPipeConfig linear_config() {
    ColorPipeConfig c;
    c.apply_gamma = false;
    c.apply_white_balance = false;
    return c;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("embedded table equals the checked-in data file") {
    const auto rows = read_data_file();
    const auto& t = CmfTable::cie1931();
    REQUIRE(rows.size() == 471);
    REQUIRE(t.size() == 471);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(t.xbar()[i] == rows[i].x);
        CHECK(t.ybar()[i] == rows[i].y);
        CHECK(t.zbar()[i] == rows[i].z);
    }
    CHECK(t.wavelength(0) == 360);
    CHECK(t.wavelength(470) == 830);
}

TEST_CASE("ybar peaks at 555 nm with value near 1") {
    const auto& t = CmfTable::cie1931();
    const auto& y = t.ybar();
    const auto peak = std::max_element(y.begin(), y.end());
    CHECK(*peak >= 0.99);
    CHECK(*peak <= 1.01);
    CHECK(t.wavelength(static_cast<std::size_t>(peak - y.begin())) == 555);
    const auto cmf = resample_cmf(SpectralBasis({555}));
    CHECK(cmf.y[0] == *peak);
    for (std::size_t i = 0; i < t.size(); ++i) {
        CHECK(t.xbar()[i] >= 0);
        CHECK(t.ybar()[i] >= 0);
        CHECK(t.zbar()[i] >= 0);
    }
}

TEST_CASE("grid wavelengths sample the table without interpolation") {
    const auto& t = CmfTable::cie1931();
    for (int nm : {360, 415, 500, 623, 808, 830}) {
        const auto v = t.at(nm);
        const auto i = static_cast<std::size_t>(nm - 360);
        CHECK(v[0] == t.xbar()[i]);
        CHECK(v[1] == t.ybar()[i]);
        CHECK(v[2] == t.zbar()[i]);
    }
    const auto mid = t.at(500.5);
    CHECK(mid[1] == doctest::Approx(0.5 * (t.ybar()[140] + t.ybar()[141])).epsilon(1e-14));
    CHECK_THROWS_AS((void)t.at(359.9), DomainError);
    CHECK_THROWS_AS((void)t.at(830.1), DomainError);
}

TEST_CASE("16-band sensor basis resamples to finite nonnegative triplets") {
    const auto cmf = resample_cmf(sensor16_basis());
    REQUIRE(cmf.bands() == 16);
    CHECK(cmf.basis[0] == 415);
    CHECK(cmf.basis[15] == 808);
    for (int b = 0; b < 16; ++b) {
        for (double v : {cmf.x[b], cmf.y[b], cmf.z[b]}) {
            CHECK(std::isfinite(v));
            CHECK(v >= 0);
        }
    }
}

TEST_CASE("quadrature weights are trapezoidal band widths") {
    const SpectralBasis basis({500, 510, 530});
    const auto plain = resample_cmf(basis);
    const auto weighted = resample_cmf(basis, true);
    CHECK(weighted.y[0] == doctest::Approx(plain.y[0] * 5));
    CHECK(weighted.y[1] == doctest::Approx(plain.y[1] * 15));
    CHECK(weighted.y[2] == doctest::Approx(plain.y[2] * 10));
}

TEST_CASE("spectral_to_xyz on zero, one-hot and flat spectra") {
    const auto cmf = resample_cmf(SpectralBasis::uniform(400, 750, 8));
    const std::vector<double> zero(8, 0.0);
    const auto z = spectral_to_xyz<double>(zero, cmf);
    CHECK(z == std::array<double, 3>{0, 0, 0});
    for (int b = 0; b < 8; ++b) {
        std::vector<double> s(8, 0.0);
        s[static_cast<std::size_t>(b)] = 1;
        const auto v = spectral_to_xyz<double>(s, cmf);
        CHECK(v[0] == cmf.x[b]);
        CHECK(v[1] == cmf.y[b]);
        CHECK(v[2] == cmf.z[b]);
    }
    const std::vector<double> flat(8, 1.0);
    const auto f = spectral_to_xyz<double>(flat, cmf);
    CHECK(f[0] == doctest::Approx(std::accumulate(cmf.x.begin(), cmf.x.end(), 0.0)).epsilon(1e-14));
    CHECK(f[1] == doctest::Approx(std::accumulate(cmf.y.begin(), cmf.y.end(), 0.0)).epsilon(1e-14));
    CHECK(f[2] == doctest::Approx(std::accumulate(cmf.z.begin(), cmf.z.end(), 0.0)).epsilon(1e-14));
    const std::vector<double> wrong(7, 1.0);
    CHECK_THROWS_AS(spectral_to_xyz<double>(wrong, cmf), ContractViolation);
}

TEST_CASE("spectral_to_xyz is linear") {
    std::mt19937_64 rng(1);
    const auto cmf = resample_cmf(SpectralBasis::uniform(415, 808, 16));
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> s(16), t(16), comb(16), twice(16);
        const double a = test::uniform(rng, -3, 3);
        for (int b = 0; b < 16; ++b) {
            s[b] = test::uniform(rng, 0, 1);
            t[b] = test::uniform(rng, 0, 1);
            comb[b] = a * s[b] + t[b];
            twice[b] = 2 * s[b];
        }
        const auto xs = spectral_to_xyz<double>(s, cmf), xt = spectral_to_xyz<double>(t, cmf);
        const auto xc = spectral_to_xyz<double>(comb, cmf), x2 = spectral_to_xyz<double>(twice, cmf);
        for (int k = 0; k < 3; ++k) {
            CHECK(xc[k] == doctest::Approx(a * xs[k] + xt[k]).epsilon(1e-12));
            CHECK(x2[k] == 2 * xs[k]);
        }
    }
}

TEST_CASE("increasing any band never decreases Y") {
    std::mt19937_64 rng(2);
    const auto cmf = resample_cmf(sensor16_basis());
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> s(16);
        for (auto& v : s) v = test::uniform(rng, 0, 1);
        const double y0 = spectral_to_xyz<double>(s, cmf)[1];
        for (int b = 0; b < 16; ++b) {
            auto u = s;
            u[b] += test::uniform(rng, 0, 1);
            CHECK(spectral_to_xyz<double>(u, cmf)[1] >= y0);
        }
    }
}

TEST_CASE("D65 white and the sRGB matrix") {
    const auto w = white_point_xyz({});
    CHECK(w[0] == doctest::Approx(0.95047).epsilon(1e-4));
    CHECK(w[1] == 1.0);
    CHECK(w[2] == doctest::Approx(1.08883).epsilon(1e-3));
    const auto m = srgb_matrix_for_white(w);
    const Mat3d ref{{{3.2406, -1.5372, -0.4986}, {-0.9689, 1.8758, 0.0415}, {0.0557, -0.2040, 1.0570}}};
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) CHECK(m[r][c] == doctest::Approx(ref[r][c]).epsilon(2e-3));
    for (int r = 0; r < 3; ++r) CHECK(m[r][0] * w[0] + m[r][1] * w[1] + m[r][2] * w[2] == doctest::Approx(1.0));
}

TEST_CASE("colour config validation") {
    ColorPipeConfig c;
    c.xyz_to_linear_rgb = Mat3d{{{1, 2, 3}, {2, 4, 6}, {0, 0, 1}}};
    CHECK_THROWS_AS(validate_color_config(c), ConfigError);
    c = {};
    c.white_point = WhitePoint::Custom;
    c.custom_white = {1, 0, 1};
    CHECK_THROWS_AS(validate_color_config(c), ConfigError);
    c = {};
    c.gamma_mode = GammaMode::Power;
    c.gamma = 0;
    CHECK_THROWS_AS(validate_color_config(c), ConfigError);
}

TEST_CASE("zero XYZ maps to zero RGB in every config") {
    const auto cmf = resample_cmf(SpectralBasis::uniform(400, 750, 8));
    for (bool gamma : {false, true})
        for (bool wb : {false, true})
            for (auto wp : {WhitePoint::D65, WhitePoint::EqualEnergy}) {
                ColorPipeConfig c;
                c.apply_gamma = gamma;
                c.apply_white_balance = wb;
                c.white_point = wp;
                CHECK(xyz_to_rgb<double>({0, 0, 0}, c, cmf) == std::array<double, 3>{0, 0, 0});
            }
}

TEST_CASE("white balance keeps a flat spectrum on the gray axis") {
    for (auto wp : {WhitePoint::EqualEnergy, WhitePoint::D65})
        for (int n : {8, 16}) {
            ColorPipeConfig c;
            c.white_point = wp;
            c.apply_gamma = false;
            const ColorPipe pipe(default_basis(n), c);
            CHECK(pipe.wb_scale()[1] == 1.0);
            const std::vector<double> flat(static_cast<std::size_t>(n), 0.1);
            const auto rgb = pipe.spectrum_to_rgb<double>(flat);
            CHECK(std::abs(rgb[0] - rgb[1]) <= 1e-6);
            CHECK(std::abs(rgb[2] - rgb[1]) <= 1e-6);
        }
}

TEST_CASE("without gamma doubling XYZ doubles linear RGB") {
    std::mt19937_64 rng(3);
    const auto cmf = resample_cmf(SpectralBasis::uniform(400, 750, 8));
    ColorPipeConfig c;
    c.apply_gamma = false;
    for (int t = 0; t < 20; ++t) {
        const std::array<double, 3> xyz{test::uniform(rng, 0, 1), test::uniform(rng, 0, 1), test::uniform(rng, 0, 1)};
        const auto a = xyz_to_rgb(xyz, c, cmf);
        const auto b = xyz_to_rgb<double>({2 * xyz[0], 2 * xyz[1], 2 * xyz[2]}, c, cmf);
        for (int k = 0; k < 3; ++k) CHECK(b[k] == doctest::Approx(2 * a[k]).epsilon(1e-14));
    }
}

TEST_CASE("sRGB and power encodings") {
    ColorPipeConfig c;
    CHECK(encode_channel(0.0, c) == 0.0);
    CHECK(encode_channel(1.0, c) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(encode_channel(0.002, c) == doctest::Approx(0.002 * 12.92));
    CHECK(encode_channel(-0.01, c) == doctest::Approx(-0.1292));
    CHECK(encode_channel(0.5, c) == doctest::Approx(srgb_encode(0.5)));
    CHECK(encode_channel_derivative(0.001, c) == doctest::Approx(12.92));
    c.gamma_mode = GammaMode::Power;
    CHECK(encode_channel(0.25, c) == doctest::Approx(std::pow(0.25, 1 / 2.2)));
    CHECK(encode_channel(-0.25, c) == 0.0);
    c.apply_gamma = false;
    CHECK(encode_channel(-0.25, c) == -0.25);
    CHECK(encode_channel_derivative(0.3, c) == 1.0);
}

TEST_CASE("clamp_for_output respects the colour space") {
    RgbImage<double> enc(1, 1, ColorSpace::EncodedRGB);
    enc.data = {-0.5, 0.5, 1.5};
    clamp_for_output(enc);
    CHECK(enc.data == std::vector<double>{0, 0.5, 1});
    RgbImage<double> lin(1, 1, ColorSpace::LinearRGB);
    lin.data = {-0.5, 0.5, 1.5};
    clamp_for_output(lin);
    CHECK(lin.data == std::vector<double>{0, 0.5, 1.5});
}

TEST_CASE("pixel-level conversion equals a scalar reference loop") {
    std::mt19937_64 rng(4);
    const auto basis = SpectralBasis::uniform(400, 750, 8);
    const auto cube = test::random_cube<double>(rng, 4, 4, basis);
    const ColorPipe pipe(basis, {});
    const auto rgb = convert_pixel_level(cube, pipe);
    CHECK(rgb.color_space == ColorSpace::EncodedRGB);
    const auto cmf = resample_cmf(basis);
    const auto& m = pipe.matrix();
    const auto& wb = pipe.wb_scale();
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            double xyz[3] = {0, 0, 0};
            for (int b = 0; b < 8; ++b) {
                xyz[0] += cube.at(y, x, b) * cmf.x[b];
                xyz[1] += cube.at(y, x, b) * cmf.y[b];
                xyz[2] += cube.at(y, x, b) * cmf.z[b];
            }
            for (int r = 0; r < 3; ++r) {
                const double lin = m[r][0] * wb[0] * xyz[0] + m[r][1] * wb[1] * xyz[1] + m[r][2] * wb[2] * xyz[2];
                CHECK(std::abs(rgb.at(y, x, r) - srgb_encode(lin)) <= 1e-7);
            }
        }
}

TEST_CASE("1x1 conversion composes the scalar ops and uniform images stay uniform") {
    const auto basis = SpectralBasis::uniform(415, 808, 16);
    SpectralImage<double> one(1, 1, basis);
    for (int b = 0; b < 16; ++b) one.data[b] = 0.03 * b;
    ColorPipeConfig cfg;
    const auto cmf = resample_cmf(basis);
    const auto direct = xyz_to_rgb(spectral_to_xyz<double>(one.data, cmf), cfg, cmf);
    auto rgb = convert_pixel_level(one, cfg);
    clamp_for_output(rgb);
    for (int c = 0; c < 3; ++c) CHECK(rgb.data[c] == doctest::Approx(direct[c]).epsilon(1e-14));

    SpectralImage<double> uni(3, 5, basis);
    for (std::size_t i = 0; i < uni.data.size(); ++i) uni.data[i] = one.data[i % 16];
    const auto u = convert_pixel_level(uni, cfg);
    for (std::size_t i = 0; i < u.data.size(); ++i) CHECK(u.data[i] == u.data[i % 3]);
}

TEST_CASE("pixel-level vjp matches central differences") {
    std::mt19937_64 rng(5);
    const auto basis = SpectralBasis::uniform(415, 808, 6);
    for (bool gamma : {false, true}) {
        ColorPipeConfig cfg;
        cfg.apply_gamma = gamma;
        const ColorPipe pipe(basis, cfg);
        auto cube = test::random_cube<double>(rng, 3, 3, basis, 0.05, 1);
        std::vector<double> g(27);
        for (auto& v : g) v = test::normal(rng);
        const auto grad = convert_pixel_level_vjp<double>(cube, pipe, g);
        const double h = 1e-5;
        double f0 = 0;
        const auto r0 = convert_pixel_level(cube, pipe).data;
        for (std::size_t k = 0; k < g.size(); ++k) f0 += std::abs(g[k] * r0[k]);
        for (std::size_t i = 0; i < cube.data.size(); ++i) {
            auto p = cube, m = cube;
            p.data[i] += h;
            m.data[i] -= h;
            const auto rp = convert_pixel_level(p, pipe).data, rm = convert_pixel_level(m, pipe).data;
            double fd = 0;
            for (std::size_t k = 0; k < g.size(); ++k) fd += g[k] * (rp[k] - rm[k]) / (2 * h);
            CAPTURE(gamma);
            CAPTURE(grad[i]);
            CAPTURE(fd);
            CHECK(test::fd_agrees(grad[i], fd, test::fd_noise(f0, h)));
        }
    }
}

TEST_CASE("single Gaussian: Gaussian-level colour equals its converted radiance times its weight") {
    std::mt19937_64 rng(6);
    const auto basis = SpectralBasis::uniform(400, 750, 8);
    const auto cloud = test::random_cloud<double>(rng, 1, basis, 1);
    const auto cam = test::front_camera<double>(12, 12);
    const ColorPipe pipe(basis, linear_config());
    const auto gl = convert_gaussian_level(cloud, cam, pipe);
    const auto spectral = rasterize(cloud, cam);
    const auto rgb = pipe.spectrum_to_rgb<double>(spectral.aux.radiance);
    for (int y = 0; y < 12; ++y)
        for (int x = 0; x < 12; ++x) {
            const auto c = spectral.aux.composite.contributors(x, y);
            const double w = c.empty() ? 0.0 : c[0].alpha * c[0].transmittance;
            for (int k = 0; k < 3; ++k) CHECK(gl.image.at(y, x, k) == doctest::Approx(rgb[k] * w).epsilon(1e-12));
        }
}

TEST_CASE("linear conversion commutes with compositing") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(seed);
        const auto basis = test::random_basis(rng, test::uniform_int(rng, 4, 16));
        const auto cloud = test::random_cloud<float>(rng, static_cast<std::size_t>(test::uniform_int(rng, 2, 20)), basis, 2);
        const auto cam = test::front_camera<float>(24, 24);
        const ColorPipe pipe(basis, linear_config());
        const auto a = convert_gaussian_level(cloud, cam, pipe).image;
        const auto b = convert_pixel_level(rasterize(cloud, cam).image, pipe);
        double m = 0;
        for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, static_cast<double>(std::abs(a.data[i] - b.data[i])));
        CHECK(m <= 1e-5);
    }
}

TEST_CASE("gamma breaks commutation on two overlapping Gaussians") {
    GaussianCloud<double> c(SpectralBasis::uniform(415, 808, 16), 0, 2);
    for (int i = 0; i < 2; ++i) {
        c.positions[3 * i + 2] = 2.0 + i;
        for (int a = 0; a < 3; ++a) c.log_scales[3 * i + a] = std::log(0.3);
        c.opacity_logits[i] = 0;
    }
    for (int b = 0; b < 16; ++b) {
        c.sh_of(0)[b] = b < 8 ? 1.5 : -1.7;
        c.sh_of(1)[b] = b < 8 ? -1.7 : 1.5;
    }
    const auto cam = test::front_camera<double>(9, 9);
    const ColorPipe pipe(c.basis, {});
    const auto a = convert_gaussian_level(c, cam, pipe).image;
    const auto b = convert_pixel_level(rasterize(c, cam).image, pipe);
    CHECK(max_abs_diff(a.data, b.data) > 1e-3);
}

TEST_CASE("Gaussian-level backward matches central differences") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        std::mt19937_64 rng(50 + seed);
        const auto basis = test::random_basis(rng, 6);
        auto cloud = test::random_cloud<double>(rng, 4, basis, 1);
        const auto cam = test::front_camera<double>(8, 8);
        const auto settings = test::smooth_settings();
        const ColorPipe pipe(basis, {});
        const auto r = convert_gaussian_level(cloud, cam, pipe, settings);
        std::vector<double> g(r.image.data.size());
        for (auto& v : g) v = test::normal(rng);
        const auto grad = convert_gaussian_level_backward<double>(cloud, cam, pipe, r.aux, g, settings);
        auto objective = [&] {
            const auto im = convert_gaussian_level(cloud, cam, pipe, settings).image.data;
            return std::inner_product(im.begin(), im.end(), g.begin(), 0.0);
        };
        const double h = 1e-5;
        const double noise = test::fd_noise(objective(), h);
        auto check = [&](std::vector<double>& values, const std::vector<double>& analytic) {
            for (std::size_t i = 0; i < values.size(); ++i) {
                if (std::abs(analytic[i]) <= 1e-8) continue;
                const double x0 = values[i];
                values[i] = x0 + h;
                const double lp = objective();
                values[i] = x0 - h;
                const double lm = objective();
                values[i] = x0;
                CHECK(test::fd_agrees(analytic[i], (lp - lm) / (2 * h), noise));
            }
        };
        check(cloud.positions, grad.positions);
        check(cloud.log_scales, grad.log_scales);
        check(cloud.rotations, grad.rotations);
        check(cloud.opacity_logits, grad.opacity_logits);
        check(cloud.sh_coeffs, grad.sh_coeffs);
    }
}

TEST_CASE("conversion rejects a mismatched basis") {
    const SpectralImage<double> im(2, 2, SpectralBasis::uniform(400, 700, 4));
    const ColorPipe pipe(SpectralBasis::uniform(400, 700, 5), {});
    CHECK_THROWS_AS(convert_pixel_level(im, pipe), ContractViolation);
}

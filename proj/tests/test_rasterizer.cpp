#include <numeric>
#include <random>

#include "doctest.h"
#include "msgs/rasterizer.hpp"
#include "msgs/scene_io.hpp"
#include "msgs/sh.hpp"
#include "support.hpp"

using namespace msgs;

namespace {

GaussianCloud<double> on_axis(const std::vector<double>& depths, double scale, double opacity, int bands = 3) {
    GaussianCloud<double> c(SpectralBasis::uniform(450, 650, bands), 0, depths.size());
    for (std::size_t i = 0; i < depths.size(); ++i) {
        c.positions[3 * i + 2] = depths[i];
        for (int a = 0; a < 3; ++a) c.log_scales[3 * i + static_cast<std::size_t>(a)] = std::log(scale);
        c.opacity_logits[i] = logit(opacity);
    }
    return c;
}

/// sh0 value whose decode is `radiance`.
double sh0_for(double radiance) { return (radiance - 0.5) / sh::kC0; }

template <typename T>
GaussianCloud<T> permuted(const GaussianCloud<T>& c, const std::vector<std::size_t>& perm) {
    GaussianCloud<T> out(c.basis, c.sh_degree, c.size());
    const std::size_t s = c.sh_stride();
    for (std::size_t i = 0; i < perm.size(); ++i) {
        const std::size_t j = perm[i];
        std::copy_n(c.positions.begin() + 3 * j, 3, out.positions.begin() + 3 * i);
        std::copy_n(c.log_scales.begin() + 3 * j, 3, out.log_scales.begin() + 3 * i);
        std::copy_n(c.rotations.begin() + 4 * j, 4, out.rotations.begin() + 4 * i);
        out.opacity_logits[i] = c.opacity_logits[j];
        std::copy_n(c.sh_coeffs.begin() + static_cast<std::ptrdiff_t>(s * j), s, out.sh_coeffs.begin() + static_cast<std::ptrdiff_t>(s * i));
    }
    return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    REQUIRE(a.size() == b.size());
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("on-axis isotropic Gaussian projects to the principal point") {
    auto cam = test::front_camera<double>(16, 12, 20);
    cam.fy = 25;
    const double s = 0.2, z = 3.0;
    const auto proj = project(on_axis({z}, s, 0.5), cam);
    const auto& g = proj.gaussians[0];
    REQUIRE(g.visible);
    CHECK(g.mean2d[0] == doctest::Approx(cam.cx));
    CHECK(g.mean2d[1] == doctest::Approx(cam.cy));
    CHECK(g.cov2d[0] == doctest::Approx(std::pow(s * cam.fx / z, 2) + 0.3));
    CHECK(g.cov2d[1] == doctest::Approx(0).epsilon(1e-12));
    CHECK(g.cov2d[2] == doctest::Approx(std::pow(s * cam.fy / z, 2) + 0.3));
    CHECK(g.depth == z);
    CHECK(g.conic[0] * g.cov2d[0] == doctest::Approx(1));
}

TEST_CASE("Gaussians at or behind the near plane are culled") {
    const auto cam = test::front_camera<double>(8, 8);
    const auto proj = project(on_axis({0.005, -1.0, 2.0}, 0.1, 0.5), cam);
    const auto cull = proj.cull_mask();
    CHECK(cull == std::vector<bool>{true, true, false});
    CHECK(proj.depth_order == std::vector<std::uint32_t>{2});
}

TEST_CASE("rotating an isotropic Gaussian leaves cov2d unchanged") {
    std::mt19937_64 rng(11);
    const auto cam = test::front_camera<double>(16, 16);
    auto c = on_axis({3.0}, 0.25, 0.5);
    c.positions[0] = 0.3;
    c.positions[1] = -0.2;
    const auto base = project(c, cam).gaussians[0].cov2d;
    for (int t = 0; t < 10; ++t) {
        double n = 0;
        for (int a = 0; a < 4; ++a) {
            c.rotations[static_cast<std::size_t>(a)] = test::normal(rng);
            n += c.rotations[static_cast<std::size_t>(a)] * c.rotations[static_cast<std::size_t>(a)];
        }
        for (int a = 0; a < 4; ++a) c.rotations[static_cast<std::size_t>(a)] /= std::sqrt(n);
        const auto cov = project(c, cam).gaussians[0].cov2d;
        for (int k = 0; k < 3; ++k) CHECK(cov[static_cast<std::size_t>(k)] == doctest::Approx(base[static_cast<std::size_t>(k)]).epsilon(1e-12));
    }
}

TEST_CASE("single opaque Gaussian at its own pixel yields c * alpha_max") {
    const auto cam = test::front_camera<double>(9, 9);
    auto c = on_axis({2.0}, 0.1, 0.5);
    c.opacity_logits[0] = 30;
    const double rad[3] = {0.2, 0.7, 1.3};
    for (int b = 0; b < 3; ++b) c.sh_coeffs[static_cast<std::size_t>(b)] = sh0_for(rad[b]);
    const auto r = rasterize(c, cam);
    for (int b = 0; b < 3; ++b) CHECK(r.image.at(4, 4, b) == doctest::Approx(rad[b] * 0.99).epsilon(1e-12));
    CHECK(r.aux.composite.contributors(4, 4).size() == 1);
}

TEST_CASE("two aligned half-transparent Gaussians composite front to back") {
    const auto cam = test::front_camera<double>(9, 9);
    auto c = on_axis({3.0, 2.0}, 0.1, 0.5, 1);  // index 1 is in front
    c.sh_coeffs = {sh0_for(0.8), sh0_for(0.4)};
    const auto r = rasterize(c, cam);
    CHECK(r.image.at(4, 4, 0) == doctest::Approx(0.5 * 0.4 + 0.25 * 0.8).epsilon(1e-12));
    const auto contrib = r.aux.composite.contributors(4, 4);
    REQUIRE(contrib.size() == 2);
    CHECK(contrib[0].gaussian == 1);
    CHECK(contrib[1].transmittance == doctest::Approx(0.5));
}

TEST_CASE("background fills the leftover transmittance") {
    const auto cam = test::front_camera<double>(9, 9);
    auto c = on_axis({2.0}, 0.1, 0.5, 2);
    RenderSettings s;
    s.background = {0.25, 1.0};
    const auto r = rasterize(c, cam, s);
    CHECK(r.image.at(0, 0, 0) == doctest::Approx(0.25));
    CHECK(r.image.at(4, 4, 1) == doctest::Approx(0.5 * 0.5 + 0.5 * 1.0));
    s.background = {1.0};
    CHECK_THROWS_AS(rasterize(c, cam, s), ContractViolation);
}

TEST_CASE("tiled renderer matches the naive evaluator") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::mt19937_64 rng(seed);
        const int w = test::uniform_int(rng, 8, 40), h = test::uniform_int(rng, 8, 40);
        const auto cam = test::front_camera<double>(w, h);
        const auto basis = test::random_basis(rng, test::uniform_int(rng, 1, 8));
        const auto c = test::random_cloud<double>(rng, 10, basis, test::uniform_int(rng, 0, 3));
        for (double t_min : {0.0, 1e-4}) {
            RenderSettings s;
            s.t_min = t_min;
            s.tile_size = test::uniform_int(rng, 3, 16);
            const auto tiled = rasterize(c, cam, s).image;
            const auto naive = rasterize_naive(c, cam, s);
            CHECK(max_abs_diff(tiled.data, naive.data) <= 1e-6);
        }
    }
}

TEST_CASE("transmittance plus contribution weights sum to one") {
    std::mt19937_64 rng(21);
    test::CloudShape shape;
    shape.opacity_hi = 0.99;
    const auto c = test::random_cloud<double>(rng, 30, SpectralBasis::uniform(450, 650, 2), 1, shape);
    const auto cam = test::front_camera<double>(24, 20);
    const auto r = rasterize(c, cam);
    const auto& aux = r.aux.composite;
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            double sum = aux.final_transmittance[static_cast<std::size_t>(y * cam.width + x)];
            double t = 1;
            for (const auto& k : aux.contributors(x, y)) {
                CHECK(k.transmittance == doctest::Approx(t).epsilon(1e-12));
                CHECK(k.alpha > 1.0 / 255);
                CHECK(k.alpha <= 0.99);
                sum += k.alpha * k.transmittance;
                t *= 1 - k.alpha;
            }
            CHECK(std::abs(sum - 1) <= 1e-6);
        }
}

TEST_CASE("Gaussian order does not change image or gradients") {
    std::mt19937_64 rng(5);
    const auto c = test::random_cloud<double>(rng, 12, SpectralBasis::uniform(450, 650, 3), 2);
    const auto cam = test::front_camera<double>(16, 16);
    std::vector<std::size_t> perm(c.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto p = permuted(c, perm);
    const auto a = rasterize(c, cam), b = rasterize(p, cam);
    CHECK(max_abs_diff(a.image.data, b.image.data) <= 1e-6);

    std::vector<double> gi(a.image.data.size());
    for (auto& v : gi) v = test::normal(rng);
    const auto ga = rasterize_backward<double>(c, cam, a.aux, gi);
    const auto gb = rasterize_backward<double>(p, cam, b.aux, gi);
    const std::size_t s = c.sh_stride();
    for (std::size_t i = 0; i < perm.size(); ++i) {
        const std::size_t j = perm[i];
        for (int k = 0; k < 3; ++k) CHECK(std::abs(gb.positions[3 * i + k] - ga.positions[3 * j + k]) <= 1e-6);
        for (int k = 0; k < 4; ++k) CHECK(std::abs(gb.rotations[4 * i + k] - ga.rotations[4 * j + k]) <= 1e-6);
        CHECK(std::abs(gb.opacity_logits[i] - ga.opacity_logits[j]) <= 1e-6);
        for (std::size_t k = 0; k < s; ++k) CHECK(std::abs(gb.sh_coeffs[s * i + k] - ga.sh_coeffs[s * j + k]) <= 1e-6);
    }
}

TEST_CASE("image is affine in SH coefficients away from the clamp") {
    std::mt19937_64 rng(8);
    test::CloudShape shape;
    shape.sh0_lo = 0.2;
    shape.sh0_hi = 0.8;
    shape.sh_rest = 0.02;
    auto c = test::random_cloud<double>(rng, 8, SpectralBasis::uniform(450, 650, 4), 3, shape);
    const auto cam = test::front_camera<double>(16, 16);
    auto zero = c;
    std::fill(zero.sh_coeffs.begin(), zero.sh_coeffs.end(), 0.0);
    const auto i0 = rasterize(zero, cam).image.data;
    const auto i1 = rasterize(c, cam).image.data;
    for (auto& v : c.sh_coeffs) v *= 1.7;
    const auto i2 = rasterize(c, cam).image.data;
    for (std::size_t k = 0; k < i0.size(); ++k) CHECK(i2[k] - i0[k] == doctest::Approx(1.7 * (i1[k] - i0[k])).epsilon(1e-9));
}

TEST_CASE("rendering a band subset equals slicing the full render") {
    std::mt19937_64 rng(9);
    const auto c = test::random_cloud<double>(rng, 10, SpectralBasis::uniform(415, 808, 16), 2);
    const auto cam = test::front_camera<double>(16, 16);
    const auto full = rasterize(c, cam).image;
    const std::vector<int> mask{1, 4, 5, 15};
    const auto part = rasterize(select_bands(c, mask), cam).image;
    REQUIRE(part.bands() == 4);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            for (int b = 0; b < 4; ++b) CHECK(part.at(y, x, b) == full.at(y, x, mask[static_cast<std::size_t>(b)]));
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
    std::mt19937_64 rng(12);
    const auto c = test::random_cloud<double>(rng, 5, SpectralBasis::uniform(450, 650, 3), 1);
    const auto cam = test::front_camera<double>(8, 8);
    const auto r = rasterize(c, cam);
    const std::vector<double> zero(r.image.data.size(), 0.0);
    const auto g = rasterize_backward<double>(c, cam, r.aux, zero);
    for (const auto* v : {&g.positions, &g.log_scales, &g.rotations, &g.opacity_logits, &g.sh_coeffs})
        for (double x : *v) CHECK(x == 0.0);
}

TEST_CASE("sh0 gradient of a single Gaussian at its own pixel is alpha * C0 * upstream") {
    const auto cam = test::front_camera<double>(9, 9);
    auto c = on_axis({2.0}, 0.1, 0.6, 3);
    const auto r = rasterize(c, cam);
    std::vector<double> gi(r.image.data.size(), 0.0);
    const double up[3] = {1.0, -2.0, 0.5};
    for (int b = 0; b < 3; ++b) gi[r.image.pixel_offset(4, 4) + static_cast<std::size_t>(b)] = up[b];
    const auto g = rasterize_backward<double>(c, cam, r.aux, gi);
    for (int b = 0; b < 3; ++b) CHECK(g.sh_coeffs[static_cast<std::size_t>(b)] == doctest::Approx(0.6 * sh::kC0 * up[b]).epsilon(1e-12));
}

TEST_CASE("rasterize_backward matches central differences") {
    const double h = 1e-5;
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        std::mt19937_64 rng(100 + seed);
        const auto basis = test::random_basis(rng, test::uniform_int(rng, 1, 6));
        auto c = test::random_cloud<double>(rng, 5, basis, test::uniform_int(rng, 0, 3));
        const auto cam = test::front_camera<double>(8, 8);
        const auto settings = test::smooth_settings();
        const auto r = rasterize(c, cam, settings);
        std::vector<double> gi(r.image.data.size());
        for (auto& v : gi) v = test::normal(rng);
        const auto g = rasterize_backward<double>(c, cam, r.aux, gi, settings);
        auto objective = [&](const GaussianCloud<double>& cc) {
            const auto im = rasterize(cc, cam, settings).image.data;
            return std::inner_product(im.begin(), im.end(), gi.begin(), 0.0);
        };
        const double noise = test::fd_noise(objective(c), h);
        auto check_group = [&](std::vector<double> GaussianCloud<double>::*field, const std::vector<double>& grad) {
            auto& values = c.*field;
            for (std::size_t i = 0; i < values.size(); ++i) {
                if (std::abs(grad[i]) <= 1e-8) continue;
                const double x0 = values[i];
                values[i] = x0 + h;
                const double lp = objective(c);
                values[i] = x0 - h;
                const double lm = objective(c);
                values[i] = x0;
                CHECK(test::fd_agrees(grad[i], (lp - lm) / (2 * h), noise));
            }
        };
        check_group(&GaussianCloud<double>::positions, g.positions);
        check_group(&GaussianCloud<double>::log_scales, g.log_scales);
        check_group(&GaussianCloud<double>::rotations, g.rotations);
        check_group(&GaussianCloud<double>::opacity_logits, g.opacity_logits);
        check_group(&GaussianCloud<double>::sh_coeffs, g.sh_coeffs);
    }
}

TEST_CASE("stale aux is rejected") {
    std::mt19937_64 rng(13);
    auto c = test::random_cloud<double>(rng, 4, SpectralBasis::uniform(450, 650, 2), 1);
    const auto cam = test::front_camera<double>(8, 8);
    const auto r = rasterize(c, cam);
    const std::vector<double> gi(r.image.data.size(), 1.0);
    CHECK_NOTHROW(rasterize_backward<double>(c, cam, r.aux, gi));
    c.positions[0] += 1e-3;
    CHECK_THROWS_AS(rasterize_backward<double>(c, cam, r.aux, gi), ContractViolation);
    c.positions[0] -= 1e-3;
    auto cam2 = cam;
    cam2.fx *= 1.01;
    CHECK_THROWS_AS(rasterize_backward<double>(c, cam2, r.aux, gi), ContractViolation);
    const std::vector<double> short_grad(gi.size() - 1, 1.0);
    CHECK_THROWS_AS(rasterize_backward<double>(c, cam, r.aux, short_grad), ContractViolation);
}

TEST_CASE("forward and backward are bitwise identical across thread counts") {
    std::mt19937_64 rng(14);
    const auto c = test::random_cloud<float>(rng, 60, SpectralBasis::uniform(450, 650, 4), 2);
    const auto cam = test::front_camera<float>(48, 40);
    std::vector<float> gi;
    auto run = [&](int threads) {
        set_num_threads(threads);
        auto r = rasterize(c, cam);
        if (gi.empty()) {
            gi.resize(r.image.data.size());
            for (auto& v : gi) v = static_cast<float>(test::normal(rng));
        }
        auto g = rasterize_backward<float>(c, cam, r.aux, gi);
        return std::make_pair(r.image.data, g);
    };
    const auto [i1, g1] = run(1);
    const auto [i4, g4] = run(4);
    const auto [i4b, g4b] = run(4);
    set_num_threads(0);
    CHECK(i1 == i4);
    CHECK(i4 == i4b);
    CHECK(g1.positions == g4.positions);
    CHECK(g1.log_scales == g4.log_scales);
    CHECK(g1.rotations == g4.rotations);
    CHECK(g1.opacity_logits == g4.opacity_logits);
    CHECK(g1.sh_coeffs == g4.sh_coeffs);
    CHECK(g4.sh_coeffs == g4b.sh_coeffs);
}

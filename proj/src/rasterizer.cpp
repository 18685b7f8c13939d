#include "msgs/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "msgs/sh.hpp"

namespace msgs {

namespace {

template <typename T>
using Mat3 = std::array<std::array<T, 3>, 3>;

template <typename T>
Mat3<T> quat_to_rot(T w, T x, T y, T z) {
    return {{{T(1) - T(2) * (y * y + z * z), T(2) * (x * y - w * z), T(2) * (x * z + w * y)},
             {T(2) * (x * y + w * z), T(1) - T(2) * (x * x + z * z), T(2) * (y * z - w * x)},
             {T(2) * (x * z - w * y), T(2) * (y * z + w * x), T(1) - T(2) * (x * x + y * y)}}};
}

/// Normalized quaternion of Gaussian i and its pre-normalization length.
template <typename T>
std::array<T, 4> unit_quat(const T* q, T& norm) {
    norm = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    return {q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm};
}

/// World-space covariance R S S^T R^T; also returns M = R S.
template <typename T>
Mat3<T> covariance3d(const GaussianCloud<T>& cloud, std::size_t i, Mat3<T>* m_out = nullptr, Mat3<T>* r_out = nullptr,
                     std::array<T, 3>* s_out = nullptr) {
    T qn;
    const auto q = unit_quat(cloud.rotations.data() + 4 * i, qn);
    const Mat3<T> r = quat_to_rot(q[0], q[1], q[2], q[3]);
    const std::array<T, 3> s{std::exp(cloud.log_scales[3 * i]), std::exp(cloud.log_scales[3 * i + 1]),
                             std::exp(cloud.log_scales[3 * i + 2])};
    Mat3<T> m{};
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) m[a][b] = r[a][b] * s[b];
    Mat3<T> sigma{};
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
            T acc = 0;
            for (int k = 0; k < 3; ++k) acc += m[a][k] * m[b][k];
            sigma[a][b] = acc;
        }
    if (m_out) *m_out = m;
    if (r_out) *r_out = r;
    if (s_out) *s_out = s;
    return sigma;
}

/// T2 = J W, the 2x3 map from world offsets to pixel offsets.
template <typename T>
std::array<std::array<T, 3>, 2> screen_jacobian(const Camera<T>& cam, const std::array<T, 3>& t) {
    const T iz = T(1) / t[2];
    const T j00 = cam.fx * iz, j02 = -cam.fx * t[0] * iz * iz;
    const T j11 = cam.fy * iz, j12 = -cam.fy * t[1] * iz * iz;
    std::array<std::array<T, 3>, 2> out{};
    for (int c = 0; c < 3; ++c) {
        out[0][c] = j00 * cam.rot(0, c) + j02 * cam.rot(2, c);
        out[1][c] = j11 * cam.rot(1, c) + j12 * cam.rot(2, c);
    }
    return out;
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

template <typename T>
std::vector<T> background_for(const RenderSettings& settings, int channels) {
    std::vector<T> bg(static_cast<std::size_t>(channels), T(0));
    if (!settings.background.empty()) {
        if (settings.background.size() != static_cast<std::size_t>(channels))
            throw ContractViolation("background has " + std::to_string(settings.background.size()) +
                                    " channels, image has " + std::to_string(channels));
        for (int c = 0; c < channels; ++c) bg[static_cast<std::size_t>(c)] = static_cast<T>(settings.background[static_cast<std::size_t>(c)]);
    }
    return bg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

template <typename T>
std::vector<bool> Projection<T>::cull_mask() const {
    std::vector<bool> m(gaussians.size());
    for (std::size_t i = 0; i < gaussians.size(); ++i) m[i] = !gaussians[i].visible;
    return m;
}

template <typename T>
Projection<T> project(const GaussianCloud<T>& cloud, const Camera<T>& camera, const RenderSettings& settings) {
    const std::size_t n = cloud.size();
    Projection<T> proj;
    proj.gaussians.resize(n);
    proj.cam_points.resize(n);
    proj.view_dirs.resize(n);
    proj.view_dist.resize(n);
    const auto center = camera.center();
    const T blur = static_cast<T>(settings.blur);
    const T alpha_min = static_cast<T>(settings.alpha_min);
    const T gx = static_cast<T>(settings.guard_band * camera.width);
    const T gy = static_cast<T>(settings.guard_band * camera.height);

#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const T* p = cloud.positions.data() + 3 * i;
        std::array<T, 3> t{};
        for (int r = 0; r < 3; ++r)
            t[static_cast<std::size_t>(r)] = camera.rot(r, 0) * p[0] + camera.rot(r, 1) * p[1] + camera.rot(r, 2) * p[2] + camera.trans(r);
        proj.cam_points[i] = t;

        std::array<T, 3> v{p[0] - center[0], p[1] - center[1], p[2] - center[2]};
        const T dist = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        proj.view_dist[i] = dist;
        proj.view_dirs[i] = dist > T(0) ? std::array<T, 3>{v[0] / dist, v[1] / dist, v[2] / dist}
                                        : std::array<T, 3>{T(0), T(0), T(1)};

        auto& g = proj.gaussians[i];
        g.depth = t[2];
        g.opacity = sigmoid(cloud.opacity_logits[i]);
        g.visible = false;
        if (!(t[2] > camera.near_plane) || !(t[2] < camera.far_plane)) continue;

        g.mean2d = {camera.fx * t[0] / t[2] + camera.cx, camera.fy * t[1] / t[2] + camera.cy};
        if (g.mean2d[0] < -gx || g.mean2d[0] > T(camera.width) + gx || g.mean2d[1] < -gy ||
            g.mean2d[1] > T(camera.height) + gy)
            continue;

        const Mat3<T> sigma = covariance3d(cloud, i);
        const auto t2 = screen_jacobian(camera, t);
        std::array<std::array<T, 3>, 2> ts{};
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 3; ++b) {
                T acc = 0;
                for (int k = 0; k < 3; ++k) acc += t2[a][k] * sigma[k][b];
                ts[a][b] = acc;
            }
        T cov[2][2];
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) {
                T acc = 0;
                for (int k = 0; k < 3; ++k) acc += ts[a][k] * t2[b][k];
                cov[a][b] = acc;
            }
        const T ca = cov[0][0] + blur, cb = cov[0][1], cc = cov[1][1] + blur;
        const T det = ca * cc - cb * cb;
        if (!(det > T(0))) continue;
        g.cov2d = {ca, cb, cc};
        g.conic = {cc / det, -cb / det, ca / det};

        if (!(g.opacity > alpha_min)) continue;
        const T mid = (ca + cc) / T(2);
        const T lambda_max = mid + std::sqrt(std::max(mid * mid - det, T(0)));
        // outside this radius opacity * exp(-q/2) <= alpha_min, so no contribution is lost
        const T k = std::max(T(3), std::sqrt(T(2) * std::log(g.opacity / alpha_min)));
        g.radius_px = k * std::sqrt(lambda_max);
        g.visible = true;
    }

    for (std::size_t i = 0; i < n; ++i)
        if (proj.gaussians[i].visible) proj.depth_order.push_back(static_cast<std::uint32_t>(i));
    std::stable_sort(proj.depth_order.begin(), proj.depth_order.end(), [&](std::uint32_t a, std::uint32_t b) {
        return proj.gaussians[a].depth < proj.gaussians[b].depth;
    });
    return proj;
}

template <typename T>
std::vector<T> shade(const GaussianCloud<T>& cloud, const Projection<T>& proj, std::vector<T>* pre_clamp) {
    const std::size_t n = cloud.size();
    const int bands = cloud.bands();
    const int k = cloud.coeffs_per_band();
    std::vector<T> out(n * static_cast<std::size_t>(bands), T(0));
    if (pre_clamp) pre_clamp->assign(out.size(), T(0));
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        std::array<T, 16> basis{};
        const auto& d = proj.view_dirs[i];
        sh::sh_basis(cloud.sh_degree, d[0], d[1], d[2], basis.data());
        const std::size_t off = i * static_cast<std::size_t>(bands);
        sh::decode_radiance(bands, k, cloud.sh_of(i).data(), basis.data(), out.data() + off,
                            pre_clamp ? pre_clamp->data() + off : nullptr);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Compositing
// ---------------------------------------------------------------------------

template <typename T>
std::span<const Contributor<T>> CompositeAux<T>::contributors(int x, int y) const {
    const int tx = x / tile_size, ty = y / tile_size;
    const int tile = ty * tiles_x + tx;
    const int x0 = tx * tile_size;
    const int tw = std::min(tile_size, width - x0);
    const int local = (y - ty * tile_size) * tw + (x - x0);
    const auto& off = tile_offsets[static_cast<std::size_t>(tile)];
    const auto& rec = tile_records[static_cast<std::size_t>(tile)];
    return {rec.data() + off[static_cast<std::size_t>(local)],
            rec.data() + off[static_cast<std::size_t>(local) + 1]};
}

template <typename T>
std::vector<T> composite(const Projection<T>& proj, std::span<const T> colors, int channels, const Camera<T>& camera,
                         const RenderSettings& settings, CompositeAux<T>* aux_out) {
    if (colors.size() != proj.size() * static_cast<std::size_t>(channels))
        throw ContractViolation("composite: colors do not match Gaussian count x channels");
    if (settings.tile_size <= 0) throw ContractViolation("composite: tile size must be positive");
    const int width = camera.width, height = camera.height, ts = settings.tile_size;
    const std::size_t nc = static_cast<std::size_t>(channels);

    CompositeAux<T> local_aux;
    CompositeAux<T>& aux = aux_out ? *aux_out : local_aux;
    aux = CompositeAux<T>{};
    aux.width = width;
    aux.height = height;
    aux.channels = channels;
    aux.tile_size = ts;
    aux.tiles_x = (width + ts - 1) / ts;
    aux.tiles_y = (height + ts - 1) / ts;
    aux.background = background_for<T>(settings, channels);
    const int n_tiles = aux.tiles_x * aux.tiles_y;
    aux.tile_gaussians.assign(static_cast<std::size_t>(n_tiles), {});
    aux.tile_records.assign(static_cast<std::size_t>(n_tiles), {});
    aux.tile_offsets.assign(static_cast<std::size_t>(n_tiles), {});
    aux.final_transmittance.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), T(1));

    // bin in depth order so every tile list is already sorted
    for (std::uint32_t gi : proj.depth_order) {
        const auto& g = proj.gaussians[gi];
        const int x_lo = std::max(0, static_cast<int>(std::floor(g.mean2d[0] - g.radius_px)));
        const int x_hi = std::min(width - 1, static_cast<int>(std::ceil(g.mean2d[0] + g.radius_px)));
        const int y_lo = std::max(0, static_cast<int>(std::floor(g.mean2d[1] - g.radius_px)));
        const int y_hi = std::min(height - 1, static_cast<int>(std::ceil(g.mean2d[1] + g.radius_px)));
        if (x_lo > x_hi || y_lo > y_hi) continue;
        for (int ty = y_lo / ts; ty <= y_hi / ts; ++ty)
            for (int tx = x_lo / ts; tx <= x_hi / ts; ++tx)
                aux.tile_gaussians[static_cast<std::size_t>(ty * aux.tiles_x + tx)].push_back(gi);
    }

    std::vector<T> image(static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * nc, T(0));
    const T alpha_min = static_cast<T>(settings.alpha_min);
    const T alpha_max = static_cast<T>(settings.alpha_max);
    const T t_min = static_cast<T>(settings.t_min);

#pragma omp parallel for schedule(dynamic)
    for (int tile = 0; tile < n_tiles; ++tile) {
        const int tx = tile % aux.tiles_x, ty = tile / aux.tiles_x;
        const int x0 = tx * ts, y0 = ty * ts;
        const int tw = std::min(ts, width - x0), th = std::min(ts, height - y0);
        const auto& list = aux.tile_gaussians[static_cast<std::size_t>(tile)];
        auto& records = aux.tile_records[static_cast<std::size_t>(tile)];
        auto& offsets = aux.tile_offsets[static_cast<std::size_t>(tile)];
        offsets.assign(static_cast<std::size_t>(tw * th + 1), 0);
        for (int ly = 0; ly < th; ++ly)
            for (int lx = 0; lx < tw; ++lx) {
                const int x = x0 + lx, y = y0 + ly;
                const std::size_t pix = static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x);
                T* out = image.data() + pix * nc;
                T trans = T(1);
                for (std::size_t slot = 0; slot < list.size(); ++slot) {
                    const std::uint32_t gi = list[slot];
                    const auto& g = proj.gaussians[gi];
                    const T dx = T(x) - g.mean2d[0], dy = T(y) - g.mean2d[1];
                    const T q = g.conic[0] * dx * dx + T(2) * g.conic[1] * dx * dy + g.conic[2] * dy * dy;
                    const T alpha = std::min(alpha_max, g.opacity * std::exp(T(-0.5) * q));
                    if (alpha <= alpha_min) continue;
                    records.push_back({gi, static_cast<std::uint32_t>(slot), alpha, trans});
                    const T w = alpha * trans;
                    const T* c = colors.data() + static_cast<std::size_t>(gi) * nc;
                    for (std::size_t ch = 0; ch < nc; ++ch) out[ch] += c[ch] * w;
                    trans *= T(1) - alpha;
                    if (trans < t_min) break;
                }
                for (std::size_t ch = 0; ch < nc; ++ch) out[ch] += trans * aux.background[ch];
                aux.final_transmittance[pix] = trans;
                offsets[static_cast<std::size_t>(ly * tw + lx + 1)] = static_cast<std::uint32_t>(records.size());
            }
    }
    return image;
}

template <typename T>
std::vector<T> composite_naive(const Projection<T>& proj, std::span<const T> colors, int channels,
                               const Camera<T>& camera, const RenderSettings& settings,
                               std::vector<T>* final_transmittance) {
    if (colors.size() != proj.size() * static_cast<std::size_t>(channels))
        throw ContractViolation("composite_naive: colors do not match Gaussian count x channels");
    const std::size_t nc = static_cast<std::size_t>(channels);
    const auto bg = background_for<T>(settings, channels);
    const T alpha_min = static_cast<T>(settings.alpha_min);
    const T alpha_max = static_cast<T>(settings.alpha_max);
    const T t_min = static_cast<T>(settings.t_min);
    std::vector<T> image(static_cast<std::size_t>(camera.width) * static_cast<std::size_t>(camera.height) * nc, T(0));
    if (final_transmittance)
        final_transmittance->assign(static_cast<std::size_t>(camera.width) * static_cast<std::size_t>(camera.height), T(1));
    for (int y = 0; y < camera.height; ++y)
        for (int x = 0; x < camera.width; ++x) {
            const std::size_t pix = static_cast<std::size_t>(y) * static_cast<std::size_t>(camera.width) + static_cast<std::size_t>(x);
            T* out = image.data() + pix * nc;
            T trans = T(1);
            for (std::uint32_t gi : proj.depth_order) {
                const auto& g = proj.gaussians[gi];
                const T dx = T(x) - g.mean2d[0], dy = T(y) - g.mean2d[1];
                const T q = g.conic[0] * dx * dx + T(2) * g.conic[1] * dx * dy + g.conic[2] * dy * dy;
                const T alpha = std::min(alpha_max, g.opacity * std::exp(T(-0.5) * q));
                if (alpha <= alpha_min) continue;
                const T w = alpha * trans;
                const T* c = colors.data() + static_cast<std::size_t>(gi) * nc;
                for (std::size_t ch = 0; ch < nc; ++ch) out[ch] += c[ch] * w;
                trans *= T(1) - alpha;
                if (trans < t_min) break;
            }
            for (std::size_t ch = 0; ch < nc; ++ch) out[ch] += trans * bg[ch];
            if (final_transmittance) (*final_transmittance)[pix] = trans;
        }
    return image;
}

template <typename T>
CompositeGrad<T> composite_backward(const Projection<T>& proj, std::span<const T> colors, int channels,
                                    const CompositeAux<T>& aux, const RenderSettings& settings,
                                    std::span<const T> grad_image) {
    const std::size_t n = proj.size();
    const std::size_t nc = static_cast<std::size_t>(channels);
    if (aux.channels != channels || colors.size() != n * nc)
        throw ContractViolation("composite_backward: aux/colors do not match the forward call");
    if (grad_image.size() != static_cast<std::size_t>(aux.width) * static_cast<std::size_t>(aux.height) * nc)
        throw ContractViolation("composite_backward: gradient image has the wrong shape");

    const T alpha_max = static_cast<T>(settings.alpha_max);
    const int ts = aux.tile_size;
    const int n_tiles = aux.tiles_x * aux.tiles_y;
    // per-slot layout: [color(C), mean2d(2), conic(3), opacity(1)]
    const std::size_t stride = nc + 6;
    std::vector<std::vector<T>> tile_grads(static_cast<std::size_t>(n_tiles));

#pragma omp parallel for schedule(dynamic)
    for (int tile = 0; tile < n_tiles; ++tile) {
        const auto& list = aux.tile_gaussians[static_cast<std::size_t>(tile)];
        auto& acc = tile_grads[static_cast<std::size_t>(tile)];
        acc.assign(list.size() * stride, T(0));
        if (list.empty()) continue;
        const int tx = tile % aux.tiles_x, ty = tile / aux.tiles_x;
        const int x0 = tx * ts, y0 = ty * ts;
        const int tw = std::min(ts, aux.width - x0), th = std::min(ts, aux.height - y0);
        const auto& records = aux.tile_records[static_cast<std::size_t>(tile)];
        const auto& offsets = aux.tile_offsets[static_cast<std::size_t>(tile)];
        std::vector<T> suffix(nc);
        for (int ly = 0; ly < th; ++ly)
            for (int lx = 0; lx < tw; ++lx) {
                const int x = x0 + lx, y = y0 + ly;
                const std::size_t pix = static_cast<std::size_t>(y) * static_cast<std::size_t>(aux.width) + static_cast<std::size_t>(x);
                const T* gpix = grad_image.data() + pix * nc;
                const T t_final = aux.final_transmittance[pix];
                for (std::size_t ch = 0; ch < nc; ++ch) suffix[ch] = t_final * aux.background[ch];
                const std::uint32_t begin = offsets[static_cast<std::size_t>(ly * tw + lx)];
                const std::uint32_t end = offsets[static_cast<std::size_t>(ly * tw + lx + 1)];
                for (std::uint32_t r = end; r-- > begin;) {
                    const auto& rec = records[r];
                    const auto& g = proj.gaussians[rec.gaussian];
                    const T* c = colors.data() + static_cast<std::size_t>(rec.gaussian) * nc;
                    T* a = acc.data() + static_cast<std::size_t>(rec.slot) * stride;
                    const T w = rec.alpha * rec.transmittance;
                    const T inv_one_minus = T(1) / (T(1) - rec.alpha);
                    T d_alpha = 0;
                    for (std::size_t ch = 0; ch < nc; ++ch) {
                        a[ch] += w * gpix[ch];
                        d_alpha += gpix[ch] * (c[ch] * rec.transmittance - suffix[ch] * inv_one_minus);
                        suffix[ch] += c[ch] * w;
                    }
                    const T dx = T(x) - g.mean2d[0], dy = T(y) - g.mean2d[1];
                    const T q = g.conic[0] * dx * dx + T(2) * g.conic[1] * dx * dy + g.conic[2] * dy * dy;
                    const T gauss = std::exp(T(-0.5) * q);
                    if (g.opacity * gauss > alpha_max) continue;  // clamped: alpha is locally constant
                    a[nc + 5] += d_alpha * gauss;
                    const T d_q = d_alpha * T(-0.5) * rec.alpha;
                    a[nc + 0] += -d_q * (T(2) * g.conic[0] * dx + T(2) * g.conic[1] * dy);
                    a[nc + 1] += -d_q * (T(2) * g.conic[1] * dx + T(2) * g.conic[2] * dy);
                    a[nc + 2] += d_q * dx * dx;
                    a[nc + 3] += d_q * T(2) * dx * dy;
                    a[nc + 4] += d_q * dy * dy;
                }
            }
    }

    CompositeGrad<T> out;
    out.colors.assign(n * nc, T(0));
    out.mean2d.assign(n * 2, T(0));
    out.conic.assign(n * 3, T(0));
    out.opacity.assign(n, T(0));
    // fixed tile order keeps the reduction independent of the thread count
    for (int tile = 0; tile < n_tiles; ++tile) {
        const auto& list = aux.tile_gaussians[static_cast<std::size_t>(tile)];
        const auto& acc = tile_grads[static_cast<std::size_t>(tile)];
        for (std::size_t slot = 0; slot < list.size(); ++slot) {
            const std::size_t gi = list[slot];
            const T* a = acc.data() + slot * stride;
            for (std::size_t ch = 0; ch < nc; ++ch) out.colors[gi * nc + ch] += a[ch];
            out.mean2d[gi * 2] += a[nc];
            out.mean2d[gi * 2 + 1] += a[nc + 1];
            for (int k = 0; k < 3; ++k) out.conic[gi * 3 + static_cast<std::size_t>(k)] += a[nc + 2 + static_cast<std::size_t>(k)];
            out.opacity[gi] += a[nc + 5];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Parameter gradients
// ---------------------------------------------------------------------------

template <typename T>
ParamGradients<T>::ParamGradients(const GaussianCloud<T>& cloud)
    : positions(cloud.positions.size(), T(0)), log_scales(cloud.log_scales.size(), T(0)),
      rotations(cloud.rotations.size(), T(0)), opacity_logits(cloud.opacity_logits.size(), T(0)),
      sh_coeffs(cloud.sh_coeffs.size(), T(0)), mean2d(cloud.size() * 2, T(0)) {}

template <typename T>
ParamGradients<T>& ParamGradients<T>::operator+=(const ParamGradients& o) {
    auto add = [](std::vector<T>& a, const std::vector<T>& b) {
        if (a.size() != b.size()) throw ContractViolation("ParamGradients: shape mismatch");
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    };
    add(positions, o.positions);
    add(log_scales, o.log_scales);
    add(rotations, o.rotations);
    add(opacity_logits, o.opacity_logits);
    add(sh_coeffs, o.sh_coeffs);
    add(mean2d, o.mean2d);
    return *this;
}

template <typename T>
void ParamGradients<T>::scale(T s) {
    for (auto* v : {&positions, &log_scales, &rotations, &opacity_logits, &sh_coeffs, &mean2d})
        for (auto& x : *v) x *= s;
}

template <typename T>
void project_backward(const GaussianCloud<T>& cloud, const Camera<T>& camera, const Projection<T>& proj,
                      const CompositeGrad<T>& grad, ParamGradients<T>& out) {
    const std::size_t n = cloud.size();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const auto& g = proj.gaussians[i];
        if (!g.visible) continue;
        const T g_u = grad.mean2d[2 * i], g_v = grad.mean2d[2 * i + 1];
        out.mean2d[2 * i] += g_u;
        out.mean2d[2 * i + 1] += g_v;
        out.opacity_logits[i] += grad.opacity[i] * g.opacity * (T(1) - g.opacity);

        // conic -> 2D covariance: dL/dCov = -K dL/dK K
        const T ka = g.conic[0], kb = g.conic[1], kc = g.conic[2];
        const T gka = grad.conic[3 * i], gkb = grad.conic[3 * i + 1] / T(2), gkc = grad.conic[3 * i + 2];
        // K * Gk
        const T p00 = ka * gka + kb * gkb, p01 = ka * gkb + kb * gkc;
        const T p10 = kb * gka + kc * gkb, p11 = kb * gkb + kc * gkc;
        const T gc[2][2] = {{-(p00 * ka + p01 * kb), -(p00 * kb + p01 * kc)},
                            {-(p10 * ka + p11 * kb), -(p10 * kb + p11 * kc)}};

        const auto& t = proj.cam_points[i];
        Mat3<T> m{}, r{};
        std::array<T, 3> s{};
        const Mat3<T> sigma = covariance3d(cloud, i, &m, &r, &s);
        const auto t2 = screen_jacobian(camera, t);

        // Cov = T2 Sigma T2^T
        Mat3<T> g_sigma{};
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
                T acc = 0;
                for (int u = 0; u < 2; ++u)
                    for (int v = 0; v < 2; ++v) acc += t2[u][a] * gc[u][v] * t2[v][b];
                g_sigma[a][b] = acc;
            }
        // dL/dT2 = 2 Gc T2 Sigma (Gc and Sigma symmetric)
        std::array<std::array<T, 3>, 2> t2s{};
        for (int u = 0; u < 2; ++u)
            for (int b = 0; b < 3; ++b) {
                T acc = 0;
                for (int k = 0; k < 3; ++k) acc += t2[u][k] * sigma[k][b];
                t2s[u][b] = acc;
            }
        std::array<std::array<T, 3>, 2> g_t2{};
        for (int u = 0; u < 2; ++u)
            for (int b = 0; b < 3; ++b) g_t2[u][b] = T(2) * (gc[u][0] * t2s[0][b] + gc[u][1] * t2s[1][b]);
        // T2 = J W  =>  dL/dJ = dL/dT2 W^T
        std::array<std::array<T, 3>, 2> g_j{};
        for (int u = 0; u < 2; ++u)
            for (int k = 0; k < 3; ++k) {
                T acc = 0;
                for (int b = 0; b < 3; ++b) acc += g_t2[u][b] * camera.rot(k, b);
                g_j[u][k] = acc;
            }
        const T iz = T(1) / t[2], iz2 = iz * iz, iz3 = iz2 * iz;
        const T fx = camera.fx, fy = camera.fy;
        std::array<T, 3> g_t{};
        g_t[0] = -fx * iz2 * g_j[0][2] + g_u * fx * iz;
        g_t[1] = -fy * iz2 * g_j[1][2] + g_v * fy * iz;
        g_t[2] = -fx * iz2 * g_j[0][0] + T(2) * fx * t[0] * iz3 * g_j[0][2] - fy * iz2 * g_j[1][1] +
                 T(2) * fy * t[1] * iz3 * g_j[1][2] - g_u * fx * t[0] * iz2 - g_v * fy * t[1] * iz2;
        for (int c = 0; c < 3; ++c)
            out.positions[3 * i + static_cast<std::size_t>(c)] +=
                camera.rot(0, c) * g_t[0] + camera.rot(1, c) * g_t[1] + camera.rot(2, c) * g_t[2];

        // Sigma = M M^T, M = R S
        Mat3<T> g_m{};
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
                T acc = 0;
                for (int k = 0; k < 3; ++k) acc += g_sigma[a][k] * m[k][b];
                g_m[a][b] = T(2) * acc;
            }
        Mat3<T> g_r{};
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) g_r[a][b] = g_m[a][b] * s[static_cast<std::size_t>(b)];
        for (int b = 0; b < 3; ++b) {
            T acc = 0;
            for (int a = 0; a < 3; ++a) acc += g_m[a][b] * r[a][b];
            out.log_scales[3 * i + static_cast<std::size_t>(b)] += acc * s[static_cast<std::size_t>(b)];
        }

        T qn;
        const auto q = unit_quat(cloud.rotations.data() + 4 * i, qn);
        const T w = q[0], x = q[1], y = q[2], z = q[3];
        const T gw = T(2) * (-z * g_r[0][1] + y * g_r[0][2] + z * g_r[1][0] - x * g_r[1][2] - y * g_r[2][0] + x * g_r[2][1]);
        const T gx = T(2) * (y * g_r[0][1] + z * g_r[0][2] + y * g_r[1][0] - T(2) * x * g_r[1][1] - w * g_r[1][2] +
                             z * g_r[2][0] + w * g_r[2][1] - T(2) * x * g_r[2][2]);
        const T gy = T(2) * (-T(2) * y * g_r[0][0] + x * g_r[0][1] + w * g_r[0][2] + x * g_r[1][0] + z * g_r[1][2] -
                             w * g_r[2][0] + z * g_r[2][1] - T(2) * y * g_r[2][2]);
        const T gz = T(2) * (-T(2) * z * g_r[0][0] - w * g_r[0][1] + x * g_r[0][2] + w * g_r[1][0] -
                             T(2) * z * g_r[1][1] + y * g_r[1][2] + x * g_r[2][0] + y * g_r[2][1]);
        const T dot = w * gw + x * gx + y * gy + z * gz;
        out.rotations[4 * i + 0] += (gw - w * dot) / qn;
        out.rotations[4 * i + 1] += (gx - x * dot) / qn;
        out.rotations[4 * i + 2] += (gy - y * dot) / qn;
        out.rotations[4 * i + 3] += (gz - z * dot) / qn;
    }
}

template <typename T>
void shade_backward(const GaussianCloud<T>& cloud, const Projection<T>& proj, std::span<const T> pre_clamp,
                    std::span<const T> grad_radiance, ParamGradients<T>& out) {
    const std::size_t n = cloud.size();
    const int bands = cloud.bands();
    const int k_count = cloud.coeffs_per_band();
    if (grad_radiance.size() != n * static_cast<std::size_t>(bands) || pre_clamp.size() != grad_radiance.size())
        throw ContractViolation("shade_backward: radiance gradient has the wrong shape");
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        if (!proj.gaussians[i].visible) continue;
        const auto& d = proj.view_dirs[i];
        std::array<T, 16> basis{};
        sh::sh_basis(cloud.sh_degree, d[0], d[1], d[2], basis.data());
        std::array<T, 16> g_basis{};
        const T* coeffs = cloud.sh_of(i).data();
        T* g_coeffs = out.sh_coeffs.data() + i * cloud.sh_stride();
        const std::size_t off = i * static_cast<std::size_t>(bands);
        for (int b = 0; b < bands; ++b) {
            if (pre_clamp[off + static_cast<std::size_t>(b)] < T(0)) continue;
            const T gb = grad_radiance[off + static_cast<std::size_t>(b)];
            if (gb == T(0)) continue;
            for (int k = 0; k < k_count; ++k) {
                g_coeffs[b * k_count + k] += gb * basis[static_cast<std::size_t>(k)];
                g_basis[static_cast<std::size_t>(k)] += gb * coeffs[b * k_count + k];
            }
        }
        if (cloud.sh_degree == 0) continue;
        std::array<T, 3> g_dir{};
        sh::sh_basis_vjp(cloud.sh_degree, d[0], d[1], d[2], g_basis.data(), g_dir.data());
        const T dot = d[0] * g_dir[0] + d[1] * g_dir[1] + d[2] * g_dir[2];
        const T inv = T(1) / proj.view_dist[i];
        for (int c = 0; c < 3; ++c)
            out.positions[3 * i + static_cast<std::size_t>(c)] +=
                (g_dir[static_cast<std::size_t>(c)] - d[static_cast<std::size_t>(c)] * dot) * inv;
    }
}

// ---------------------------------------------------------------------------
// Spectral front end
// ---------------------------------------------------------------------------

template <typename T>
std::uint64_t render_fingerprint(const GaussianCloud<T>& cloud, const Camera<T>& camera) {
    std::uint64_t h = 1469598103934665603ULL;
    const std::uint64_t n = cloud.size();
    h = fnv1a(h, &n, sizeof n);
    h = fnv1a(h, &cloud.sh_degree, sizeof cloud.sh_degree);
    for (const auto* v : {&cloud.positions, &cloud.log_scales, &cloud.rotations, &cloud.opacity_logits, &cloud.sh_coeffs})
        h = fnv1a(h, v->data(), v->size() * sizeof(T));
    const auto& wl = cloud.basis.wavelengths_nm();
    h = fnv1a(h, wl.data(), wl.size() * sizeof(double));
    h = fnv1a(h, &camera.width, sizeof camera.width);
    h = fnv1a(h, &camera.height, sizeof camera.height);
    const T intr[6] = {camera.fx, camera.fy, camera.cx, camera.cy, camera.near_plane, camera.far_plane};
    h = fnv1a(h, intr, sizeof intr);
    h = fnv1a(h, camera.world_to_camera.data(), sizeof(T) * 16);
    return h;
}

template <typename T>
RenderResult<T> rasterize(const GaussianCloud<T>& cloud, const Camera<T>& camera, const RenderSettings& settings) {
    if (cloud.bands() < 1) throw ContractViolation("rasterize: cloud has no spectral bands");
    RenderResult<T> res;
    auto& aux = res.aux;
    aux.projection = project(cloud, camera, settings);
    aux.radiance = shade(cloud, aux.projection, &aux.pre_clamp);
    auto data = composite<T>(aux.projection, aux.radiance, cloud.bands(), camera, settings, &aux.composite);
    aux.fingerprint = render_fingerprint(cloud, camera);
    res.image.height = camera.height;
    res.image.width = camera.width;
    res.image.basis = cloud.basis;
    res.image.data = std::move(data);
    return res;
}

template <typename T>
SpectralImage<T> rasterize_naive(const GaussianCloud<T>& cloud, const Camera<T>& camera, const RenderSettings& settings) {
    const auto proj = project(cloud, camera, settings);
    const auto radiance = shade(cloud, proj);
    SpectralImage<T> img;
    img.height = camera.height;
    img.width = camera.width;
    img.basis = cloud.basis;
    img.data = composite_naive<T>(proj, radiance, cloud.bands(), camera, settings);
    return img;
}

template <typename T>
ParamGradients<T> rasterize_backward(const GaussianCloud<T>& cloud, const Camera<T>& camera, const RenderAux<T>& aux,
                                     std::span<const T> grad_image, const RenderSettings& settings) {
    if (aux.fingerprint != render_fingerprint(cloud, camera) || aux.projection.size() != cloud.size())
        throw ContractViolation("rasterize_backward: aux was produced for different inputs");
    const auto cg = composite_backward<T>(aux.projection, aux.radiance, cloud.bands(), aux.composite, settings, grad_image);
    ParamGradients<T> out(cloud);
    project_backward(cloud, camera, aux.projection, cg, out);
    shade_backward<T>(cloud, aux.projection, aux.pre_clamp, cg.colors, out);
    return out;
}

void set_num_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

int num_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

#define MSGS_INSTANTIATE_RASTER(T)                                                                                     \
    template struct Projection<T>;                                                                                     \
    template struct CompositeAux<T>;                                                                                   \
    template struct ParamGradients<T>;                                                                                 \
    template Projection<T> project<T>(const GaussianCloud<T>&, const Camera<T>&, const RenderSettings&);               \
    template std::vector<T> shade<T>(const GaussianCloud<T>&, const Projection<T>&, std::vector<T>*);                  \
    template std::vector<T> composite<T>(const Projection<T>&, std::span<const T>, int, const Camera<T>&,              \
                                         const RenderSettings&, CompositeAux<T>*);                                     \
    template std::vector<T> composite_naive<T>(const Projection<T>&, std::span<const T>, int, const Camera<T>&,        \
                                               const RenderSettings&, std::vector<T>*);                                \
    template CompositeGrad<T> composite_backward<T>(const Projection<T>&, std::span<const T>, int,                     \
                                                    const CompositeAux<T>&, const RenderSettings&, std::span<const T>); \
    template void project_backward<T>(const GaussianCloud<T>&, const Camera<T>&, const Projection<T>&,                 \
                                      const CompositeGrad<T>&, ParamGradients<T>&);                                    \
    template void shade_backward<T>(const GaussianCloud<T>&, const Projection<T>&, std::span<const T>,                 \
                                    std::span<const T>, ParamGradients<T>&);                                           \
    template std::uint64_t render_fingerprint<T>(const GaussianCloud<T>&, const Camera<T>&);                           \
    template RenderResult<T> rasterize<T>(const GaussianCloud<T>&, const Camera<T>&, const RenderSettings&);           \
    template SpectralImage<T> rasterize_naive<T>(const GaussianCloud<T>&, const Camera<T>&, const RenderSettings&);    \
    template ParamGradients<T> rasterize_backward<T>(const GaussianCloud<T>&, const Camera<T>&, const RenderAux<T>&,   \
                                                     std::span<const T>, const RenderSettings&);

MSGS_INSTANTIATE_RASTER(float)
MSGS_INSTANTIATE_RASTER(double)

}  // namespace msgs

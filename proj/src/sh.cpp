#include "msgs/sh.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace msgs::sh {

template <typename T>
void sh_basis(int degree, T x, T y, T z, T* out) {
    out[0] = T(kC0);
    if (degree < 1) return;
    out[1] = T(-kC1) * y;
    out[2] = T(kC1) * z;
    out[3] = T(-kC1) * x;
    if (degree < 2) return;
    const T xx = x * x, yy = y * y, zz = z * z;
    const T xy = x * y, yz = y * z, xz = x * z;
    out[4] = T(kC2[0]) * xy;
    out[5] = T(kC2[1]) * yz;
    out[6] = T(kC2[2]) * (T(2) * zz - xx - yy);
    out[7] = T(kC2[3]) * xz;
    out[8] = T(kC2[4]) * (xx - yy);
    if (degree < 3) return;
    out[9] = T(kC3[0]) * y * (T(3) * xx - yy);
    out[10] = T(kC3[1]) * xy * z;
    out[11] = T(kC3[2]) * y * (T(4) * zz - xx - yy);
    out[12] = T(kC3[3]) * z * (T(2) * zz - T(3) * xx - T(3) * yy);
    out[13] = T(kC3[4]) * x * (T(4) * zz - xx - yy);
    out[14] = T(kC3[5]) * z * (xx - yy);
    out[15] = T(kC3[6]) * x * (xx - T(3) * yy);
}

template <typename T>
void sh_basis_vjp(int degree, T x, T y, T z, const T* g, T* grad_dir) {
    if (degree < 1) return;
    T dx = T(-kC1) * g[3];
    T dy = T(-kC1) * g[1];
    T dz = T(kC1) * g[2];
    if (degree >= 2) {
        const T c0 = T(kC2[0]), c1 = T(kC2[1]), c2 = T(kC2[2]), c3 = T(kC2[3]), c4 = T(kC2[4]);
        dx += c0 * y * g[4] - T(2) * c2 * x * g[6] + c3 * z * g[7] + T(2) * c4 * x * g[8];
        dy += c0 * x * g[4] + c1 * z * g[5] - T(2) * c2 * y * g[6] - T(2) * c4 * y * g[8];
        dz += c1 * y * g[5] + T(4) * c2 * z * g[6] + c3 * x * g[7];
    }
    if (degree >= 3) {
        const T xx = x * x, yy = y * y, zz = z * z;
        const T c0 = T(kC3[0]), c1 = T(kC3[1]), c2 = T(kC3[2]), c3 = T(kC3[3]), c4 = T(kC3[4]), c5 = T(kC3[5]),
                c6 = T(kC3[6]);
        dx += c0 * T(6) * x * y * g[9] + c1 * y * z * g[10] - c2 * T(2) * x * y * g[11] -
              c3 * T(6) * x * z * g[12] + c4 * (T(4) * zz - T(3) * xx - yy) * g[13] + c5 * T(2) * x * z * g[14] +
              c6 * (T(3) * xx - T(3) * yy) * g[15];
        dy += c0 * (T(3) * xx - T(3) * yy) * g[9] + c1 * x * z * g[10] + c2 * (T(4) * zz - xx - T(3) * yy) * g[11] -
              c3 * T(6) * y * z * g[12] - c4 * T(2) * x * y * g[13] - c5 * T(2) * y * z * g[14] -
              c6 * T(6) * x * y * g[15];
        dz += c1 * x * y * g[10] + c2 * T(8) * y * z * g[11] + c3 * (T(6) * zz - T(3) * xx - T(3) * yy) * g[12] +
              c4 * T(8) * x * z * g[13] + c5 * (xx - yy) * g[14];
    }
    grad_dir[0] += dx;
    grad_dir[1] += dy;
    grad_dir[2] += dz;
}

template <typename T>
void decode_radiance(int bands, int coeffs_per_band, const T* coeffs, const T* basis, T* out, T* pre_clamp) {
    for (int b = 0; b < bands; ++b) {
        const T* c = coeffs + static_cast<std::ptrdiff_t>(b) * coeffs_per_band;
        T v = T(0);
        for (int k = 0; k < coeffs_per_band; ++k) v += c[k] * basis[k];
        v += T(kDecodeOffset);
        if (pre_clamp) pre_clamp[b] = v;
        out[b] = std::max(v, T(0));
    }
}

namespace {

template <typename T>
void check_direction(int degree, const std::array<T, 3>& dir) {
    if (degree < 0 || degree > kMaxShDegree) throw DomainError("SH degree " + std::to_string(degree) + " outside [0, 3]");
    const double n = std::sqrt(static_cast<double>(dir[0]) * dir[0] + static_cast<double>(dir[1]) * dir[1] +
                               static_cast<double>(dir[2]) * dir[2]);
    if (!(std::abs(n - 1.0) <= 1e-6)) throw DomainError("SH direction is not unit length (norm " + std::to_string(n) + ")");
}

template <typename T>
void check_index(const GaussianCloud<T>& cloud, std::size_t index) {
    if (index >= cloud.size())
        throw ContractViolation("gaussian index " + std::to_string(index) + " out of range (count " +
                                std::to_string(cloud.size()) + ")");
}

}  // namespace

template <typename T>
ShBasisValues<T> eval_sh_basis(int degree, const std::array<T, 3>& dir) {
    check_direction(degree, dir);
    ShBasisValues<T> out;
    out.count = sh_coeff_count(degree);
    sh_basis(degree, dir[0], dir[1], dir[2], out.values.data());
    return out;
}

template <typename T>
std::vector<T> eval_radiance(const GaussianCloud<T>& cloud, std::size_t index, const std::array<T, 3>& view_dir) {
    check_index(cloud, index);
    const auto basis = eval_sh_basis(cloud.sh_degree, view_dir);
    std::vector<T> out(static_cast<std::size_t>(cloud.bands()));
    decode_radiance(cloud.bands(), cloud.coeffs_per_band(), cloud.sh_of(index).data(), basis.values.data(), out.data());
    return out;
}

template <typename T>
RadianceGrad<T> eval_radiance_vjp(const GaussianCloud<T>& cloud, std::size_t index, const std::array<T, 3>& view_dir,
                                  std::span<const T> upstream) {
    check_index(cloud, index);
    if (upstream.size() != static_cast<std::size_t>(cloud.bands()))
        throw ContractViolation("eval_radiance_vjp: upstream gradient has wrong band count");
    const auto basis = eval_sh_basis(cloud.sh_degree, view_dir);
    const int bands = cloud.bands();
    const int k_count = cloud.coeffs_per_band();
    std::vector<T> value(static_cast<std::size_t>(bands)), pre(static_cast<std::size_t>(bands));
    const T* coeffs = cloud.sh_of(index).data();
    decode_radiance(bands, k_count, coeffs, basis.values.data(), value.data(), pre.data());

    RadianceGrad<T> g;
    g.sh_coeffs.assign(cloud.sh_stride(), T(0));
    std::array<T, 16> grad_basis{};
    for (int b = 0; b < bands; ++b) {
        if (pre[static_cast<std::size_t>(b)] < T(0)) continue;
        const T up = upstream[static_cast<std::size_t>(b)];
        for (int k = 0; k < k_count; ++k) {
            g.sh_coeffs[static_cast<std::size_t>(b * k_count + k)] = up * basis[k];
            grad_basis[static_cast<std::size_t>(k)] += up * coeffs[b * k_count + k];
        }
    }
    sh_basis_vjp(cloud.sh_degree, view_dir[0], view_dir[1], view_dir[2], grad_basis.data(), g.view_dir.data());
    return g;
}

#define MSGS_INSTANTIATE_SH(T)                                                                                  \
    template void sh_basis<T>(int, T, T, T, T*);                                                                \
    template void sh_basis_vjp<T>(int, T, T, T, const T*, T*);                                                  \
    template void decode_radiance<T>(int, int, const T*, const T*, T*, T*);                                     \
    template ShBasisValues<T> eval_sh_basis<T>(int, const std::array<T, 3>&);                                   \
    template std::vector<T> eval_radiance<T>(const GaussianCloud<T>&, std::size_t, const std::array<T, 3>&);   \
    template RadianceGrad<T> eval_radiance_vjp<T>(const GaussianCloud<T>&, std::size_t, const std::array<T, 3>&, \
                                                  std::span<const T>);

MSGS_INSTANTIATE_SH(float)
MSGS_INSTANTIATE_SH(double)

}  // namespace msgs::sh

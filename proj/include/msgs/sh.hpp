#pragma once

// Real spherical harmonics through degree 3 and N-band radiance decoding.
//
// Basis ordering is (l, m) = (0,0), (1,-1), (1,0), (1,1), (2,-2), ... with the
// sign convention used by the reference Gaussian splatting implementation, so
// coefficients trained there can be loaded directly.

#include <array>
#include <span>
#include <vector>

#include "msgs/core.hpp"

namespace msgs::sh {

inline constexpr double kC0 = 0.28209479177387814;  // 1 / (2 sqrt(pi))
inline constexpr double kC1 = 0.4886025119029199;   // sqrt(3 / (4 pi))
inline constexpr std::array<double, 5> kC2{1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                           -1.0925484305920792, 0.5462742152960396};
inline constexpr std::array<double, 7> kC3{-0.5900435899266435, 2.890611442640554,  -0.4570457994644658,
                                           0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                                           -0.5900435899266435};

/// Offset added to the SH expansion before the zero clamp.
inline constexpr double kDecodeOffset = 0.5;

template <typename T>
struct ShBasisValues {
    std::array<T, 16> values{};
    int count = 0;

    [[nodiscard]] std::span<const T> view() const { return {values.data(), static_cast<std::size_t>(count)}; }
    T operator[](int k) const { return values[static_cast<std::size_t>(k)]; }
};

/// Basis values for a unit direction. Throws DomainError if |dir| differs
/// from 1 by more than 1e-6 or degree is outside [0, 3].
template <typename T>
ShBasisValues<T> eval_sh_basis(int degree, const std::array<T, 3>& dir);

/// Unchecked kernel used by the renderer; `out` holds (degree+1)^2 values.
template <typename T>
void sh_basis(int degree, T x, T y, T z, T* out);

/// Adjoint of sh_basis with respect to the (unnormalized) input direction
/// components: grad_dir += d<grad_basis, basis(dir)>/d dir.
template <typename T>
void sh_basis_vjp(int degree, T x, T y, T z, const T* grad_basis, T* grad_dir);

/// Decodes one Gaussian's coefficients ([band][k]) into per-band radiance:
/// max(0, sum_k coeffs[b][k] * basis[k] + 0.5). `pre_clamp` (optional)
/// receives the value before the clamp.
template <typename T>
void decode_radiance(int bands, int coeffs_per_band, const T* coeffs, const T* basis, T* out,
                     T* pre_clamp = nullptr);

/// N-band radiance of Gaussian `index` seen along `view_dir`.
template <typename T>
std::vector<T> eval_radiance(const GaussianCloud<T>& cloud, std::size_t index, const std::array<T, 3>& view_dir);

template <typename T>
struct RadianceGrad {
    std::vector<T> sh_coeffs;  ///< [band][k]
    std::array<T, 3> view_dir{};
};

/// Vector-Jacobian product of eval_radiance. Clamped bands get zero gradient.
template <typename T>
RadianceGrad<T> eval_radiance_vjp(const GaussianCloud<T>& cloud, std::size_t index, const std::array<T, 3>& view_dir,
                                  std::span<const T> upstream);

}  // namespace msgs::sh

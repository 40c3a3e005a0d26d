#ifndef WEAKREG_SPATIAL_HPP_
#define WEAKREG_SPATIAL_HPP_

#include "weakreg/grid.hpp"
#include "weakreg/separable.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <span>
#include <vector>

namespace weakreg {

namespace detail {

/// Linear interpolation weights along one axis with clamp-to-edge. `dw` is
/// the derivative of `w` with respect to the continuous index (0 when the
/// coordinate is clamped).
template <typename Scalar>
struct AxisInterp {
  int i0 = 0;
  int i1 = 0;
  Scalar w = 0;
  Scalar dw = 0;
};

template <typename Scalar>
AxisInterp<Scalar> axis_interp(Scalar p, int n) {
  if (n == 1) return {0, 0, Scalar(0), Scalar(0)};
  Scalar dw(1);
  if (p < Scalar(0)) {
    p = Scalar(0);
    dw = Scalar(0);
  } else if (p > Scalar(n - 1)) {
    p = Scalar(n - 1);
    dw = Scalar(0);
  }
  const int i0 = std::min(static_cast<int>(std::floor(p)), n - 2);
  return {i0, i0 + 1, p - Scalar(i0), dw};
}

/// Per-output-voxel trilinear stencil into a source grid.
template <typename Scalar>
struct Stencil {
  std::array<AxisInterp<Scalar>, 3> ax;
};

template <typename Scalar>
std::vector<Stencil<Scalar>> sampling_plan(const GridMeta& source, const VectorGrid<Scalar>& ddf) {
  if (!all_finite(ddf.data)) throw GridError("warp: non-finite displacement");
  const GridMeta& fm = ddf.meta;
  std::vector<Stencil<Scalar>> plan(fm.voxel_count());
  const Scalar* ux = ddf.component(0);
  const Scalar* uy = ddf.component(1);
  const Scalar* uz = ddf.component(2);
  const Eigen::Vector3d ratio = fm.spacing.cwiseQuotient(source.spacing);
  const Eigen::Vector3d inv = source.spacing.cwiseInverse();
  std::size_t v = 0;
  for (int k = 0; k < fm.dims[2]; ++k)
    for (int j = 0; j < fm.dims[1]; ++j)
      for (int i = 0; i < fm.dims[0]; ++i, ++v) {
        const double px = i * ratio.x() + double(ux[v]) * inv.x();
        const double py = j * ratio.y() + double(uy[v]) * inv.y();
        const double pz = k * ratio.z() + double(uz[v]) * inv.z();
        plan[v].ax = {axis_interp(Scalar(px), source.dims[0]), axis_interp(Scalar(py), source.dims[1]),
                      axis_interp(Scalar(pz), source.dims[2])};
      }
  return plan;
}

template <typename Scalar>
Scalar sample(const Scalar* f, const GridMeta& m, const Stencil<Scalar>& s) {
  const auto& [x, y, z] = s.ax;
  const std::size_t sx = 1, sy = m.dims[0], sz = static_cast<std::size_t>(m.dims[0]) * m.dims[1];
  auto at = [&](int i, int j, int k) { return f[i * sx + j * sy + k * sz]; };
  const Scalar c00 = at(x.i0, y.i0, z.i0) * (1 - x.w) + at(x.i1, y.i0, z.i0) * x.w;
  const Scalar c10 = at(x.i0, y.i1, z.i0) * (1 - x.w) + at(x.i1, y.i1, z.i0) * x.w;
  const Scalar c01 = at(x.i0, y.i0, z.i1) * (1 - x.w) + at(x.i1, y.i0, z.i1) * x.w;
  const Scalar c11 = at(x.i0, y.i1, z.i1) * (1 - x.w) + at(x.i1, y.i1, z.i1) * x.w;
  const Scalar c0 = c00 * (1 - y.w) + c10 * y.w;
  const Scalar c1 = c01 * (1 - y.w) + c11 * y.w;
  return c0 * (1 - z.w) + c1 * z.w;
}

/// Accumulates g * d(sample)/d(f) into df and returns d(sample)/d(index) for
/// each axis.
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 1> sample_backward(const Scalar* f, Scalar* df, const GridMeta& m,
                                            const Stencil<Scalar>& s, Scalar g) {
  const auto& [x, y, z] = s.ax;
  const std::size_t sy = m.dims[0], sz = static_cast<std::size_t>(m.dims[0]) * m.dims[1];
  Eigen::Matrix<Scalar, 3, 1> dp = Eigen::Matrix<Scalar, 3, 1>::Zero();
  for (int c = 0; c < 8; ++c) {
    const int bx = c & 1, by = (c >> 1) & 1, bz = (c >> 2) & 1;
    const std::size_t idx = static_cast<std::size_t>(bx ? x.i1 : x.i0) + (by ? y.i1 : y.i0) * sy +
                            (bz ? z.i1 : z.i0) * sz;
    const Scalar wx = bx ? x.w : 1 - x.w;
    const Scalar wy = by ? y.w : 1 - y.w;
    const Scalar wz = bz ? z.w : 1 - z.w;
    if (df) df[idx] += g * wx * wy * wz;
    const Scalar fv = f ? f[idx] : Scalar(0);
    dp.x() += fv * (bx ? x.dw : -x.dw) * wy * wz;
    dp.y() += fv * wx * (by ? y.dw : -y.dw) * wz;
    dp.z() += fv * wx * wy * (bz ? z.dw : -z.dw);
  }
  return dp;
}

/// Warps `channels` contiguous scalar channels of `src` (grid `src_meta`).
template <typename Scalar>
std::vector<Scalar> warp_channels(std::span<const Scalar> src, const GridMeta& src_meta, int channels,
                                  const VectorGrid<Scalar>& ddf) {
  const auto plan = sampling_plan(src_meta, ddf);
  const std::size_t nout = ddf.voxels(), nin = src_meta.voxel_count();
  std::vector<Scalar> out(nout * channels);
  for (int c = 0; c < channels; ++c) {
    const Scalar* f = src.data() + c * nin;
    Scalar* o = out.data() + c * nout;
    for (std::size_t v = 0; v < nout; ++v) o[v] = sample(f, src_meta, plan[v]);
  }
  return out;
}

/// Vector-Jacobian product of warp_channels. Adds to d_src (optional) and
/// d_ddf.
template <typename Scalar>
void warp_channels_backward(std::span<const Scalar> src, const GridMeta& src_meta, int channels,
                            const VectorGrid<Scalar>& ddf, std::span<const Scalar> grad_out,
                            Scalar* d_src, VectorGrid<Scalar>* d_ddf) {
  const auto plan = sampling_plan(src_meta, ddf);
  const std::size_t nout = ddf.voxels(), nin = src_meta.voxel_count();
  const Eigen::Vector3d inv = src_meta.spacing.cwiseInverse();
  for (int c = 0; c < channels; ++c) {
    const Scalar* f = src.data() + c * nin;
    const Scalar* g = grad_out.data() + c * nout;
    Scalar* df = d_src ? d_src + c * nin : nullptr;
    for (std::size_t v = 0; v < nout; ++v) {
      if (g[v] == Scalar(0)) continue;
      const auto dp = sample_backward(f, df, src_meta, plan[v], g[v]);
      if (d_ddf) {
        d_ddf->component(0)[v] += g[v] * dp.x() * Scalar(inv.x());
        d_ddf->component(1)[v] += g[v] * dp.y() * Scalar(inv.y());
        d_ddf->component(2)[v] += g[v] * dp.z() * Scalar(inv.z());
      }
    }
  }
}

}  // namespace detail

/// Sensitivities of a warp output with respect to the source voxel values and
/// the displacement field, given the upstream gradient of the warped output.
template <typename Scalar, typename Tag>
struct WarpGradients {
  ScalarGrid<Scalar, Tag> d_input;
  VectorGrid<Scalar> d_ddf;
};

/// Pulls `source` through `ddf`: output at fixed-grid position x is the
/// trilinear sample of the source at physical point x + u(x), with clamped
/// borders. The source keeps its own grid meta.
template <typename Scalar, typename Tag>
ScalarGrid<Scalar, Tag> warp(const ScalarGrid<Scalar, Tag>& source, const VectorGrid<Scalar>& ddf) {
  auto out = detail::warp_channels<Scalar>(source.data, source.meta, 1, ddf);
  return ScalarGrid<Scalar, Tag>(ddf.meta, std::move(out));
}

template <typename Scalar>
VectorGrid<Scalar> warp(const VectorGrid<Scalar>& source, const VectorGrid<Scalar>& ddf) {
  auto out = detail::warp_channels<Scalar>(source.data, source.meta, 3, ddf);
  return VectorGrid<Scalar>(ddf.meta, std::move(out));
}

template <typename Scalar, typename Tag>
WarpGradients<Scalar, Tag> warp_backward(const ScalarGrid<Scalar, Tag>& source,
                                         const VectorGrid<Scalar>& ddf,
                                         std::span<const Scalar> grad_out) {
  if (grad_out.size() != ddf.voxels()) throw GridError("warp_backward: gradient size mismatch");
  WarpGradients<Scalar, Tag> g{ScalarGrid<Scalar, Tag>(source.meta), VectorGrid<Scalar>(ddf.meta)};
  detail::warp_channels_backward<Scalar>(source.data, source.meta, 1, ddf, grad_out,
                                         g.d_input.data.data(), &g.d_ddf);
  return g;
}

/// Adds only the displacement sensitivity into `d_ddf` (the training path).
template <typename Scalar, typename Tag>
void accumulate_warp_ddf_gradient(const ScalarGrid<Scalar, Tag>& source, const VectorGrid<Scalar>& ddf,
                                  std::span<const Scalar> grad_out, VectorGrid<Scalar>& d_ddf) {
  detail::warp_channels_backward<Scalar>(source.data, source.meta, 1, ddf, grad_out, nullptr, &d_ddf);
}

/// u(x) = A x + t - x at each voxel position.
template <typename Scalar = float>
VectorGrid<Scalar> affine_to_ddf(const AffineParams& p, const GridMeta& meta) {
  VectorGrid<Scalar> u(meta);
  const Eigen::Matrix3d L = p.A - Eigen::Matrix3d::Identity();
  std::size_t v = 0;
  for (int k = 0; k < meta.dims[2]; ++k)
    for (int j = 0; j < meta.dims[1]; ++j)
      for (int i = 0; i < meta.dims[0]; ++i, ++v)
        u.set(v, (L * meta.position(i, j, k) + p.t).template cast<Scalar>());
  return u;
}

/// Gradient of sum(g . affine_to_ddf(p)) with respect to the 12 parameters
/// (row-major A, then t).
template <typename Scalar>
std::array<double, 12> affine_to_ddf_backward(const VectorGrid<Scalar>& grad) {
  const GridMeta& meta = grad.meta;
  Eigen::Matrix3d dA = Eigen::Matrix3d::Zero();
  Eigen::Vector3d dt = Eigen::Vector3d::Zero();
  std::size_t v = 0;
  for (int k = 0; k < meta.dims[2]; ++k)
    for (int j = 0; j < meta.dims[1]; ++j)
      for (int i = 0; i < meta.dims[0]; ++i, ++v) {
        const Eigen::Vector3d g = grad.at(v).template cast<double>();
        dA += g * meta.position(i, j, k).transpose();
        dt += g;
      }
  return AffineParams{dA, dt}.to_array();
}

/// u(x) = u_inner(x) + u_outer(x + u_inner(x)), outer resampled trilinearly.
template <typename Scalar>
VectorGrid<Scalar> compose(const VectorGrid<Scalar>& outer, const VectorGrid<Scalar>& inner) {
  if (outer.meta != inner.meta) throw GridError("compose: fields must share grid meta");
  if (!all_finite(outer.data)) throw GridError("compose: non-finite outer field");
  VectorGrid<Scalar> out = warp(outer, inner);
  out.vec() += inner.vec();
  return out;
}

/// Trilinear upsampling of a level-`level` field onto the `full` grid.
template <typename Scalar>
VectorGrid<Scalar> upsample_to(const VectorGrid<Scalar>& coarse, const GridMeta& full, int level) {
  const int f = 1 << level;
  std::array<MatrixX<Scalar>, 3> ops;
  for (int a = 0; a < 3; ++a) ops[a] = upsample_operator<Scalar>(coarse.meta.dims[a], full.dims[a], f);
  VectorGrid<Scalar> out(full);
  const std::size_t nc = coarse.voxels(), nf = full.voxel_count();
  for (int c = 0; c < 3; ++c) {
    auto r = apply_separable<Scalar>(std::span<const Scalar>(coarse.data.data() + c * nc, nc),
                                     coarse.meta.dims, {&ops[0], &ops[1], &ops[2]});
    std::copy(r.begin(), r.end(), out.data.begin() + c * nf);
  }
  return out;
}

class SummandError : public GridError {
 public:
  using GridError::GridError;
};

/// Sums displacement summands given per resolution level (0 = full grid),
/// each trilinearly upsampled to `full`. Any nonempty subset of levels works.
template <typename Scalar>
VectorGrid<Scalar> aggregate_summands(const std::map<int, VectorGrid<Scalar>>& summands,
                                      const GridMeta& full) {
  if (summands.empty()) throw SummandError("aggregate_summands: no summands");
  VectorGrid<Scalar> out(full);
  for (const auto& [level, s] : summands) {
    if (level < 0) throw SummandError("aggregate_summands: negative level");
    if (s.meta.dims != level_meta(full, level).dims)
      throw SummandError("aggregate_summands: summand dims do not match level " +
                         std::to_string(level));
    if (level == 0)
      out.vec() += s.vec();
    else
      out.vec() += upsample_to(s, full, level).vec();
  }
  return out;
}

/// Augmentation magnitudes. Zero magnitudes give the identity transform.
struct AugmentationConfig {
  bool enabled = true;
  double max_rotation_deg = 10.0;
  double max_log_scale = 0.1;
  double max_shear = 0.05;
  /// Fraction of the grid extent along each axis.
  double max_translation_frac = 0.05;

  void validate() const {
    if (max_rotation_deg < 0 || max_rotation_deg > 45 || max_log_scale < 0 || max_log_scale > 0.5 ||
        max_shear < 0 || max_shear > 0.25 || max_translation_frac < 0 || max_translation_frac > 0.25)
      throw std::invalid_argument("augmentation magnitudes outside supported bounds");
  }
};

/// Random affine without flipping: A = R exp(S) with R a rotation about a
/// random axis and S symmetric (log-scales on the diagonal, shears off it),
/// so det(A) = exp(trace S) > 0. Rotation/scaling are about the grid centre.
template <typename Rng>
AffineParams random_affine(const GridMeta& meta, Rng& rng, const AugmentationConfig& cfg) {
  cfg.validate();
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  Eigen::Vector3d axis(normal(rng), normal(rng), normal(rng));
  if (axis.norm() < 1e-12) axis = Eigen::Vector3d::UnitZ();
  const double angle = unit(rng) * cfg.max_rotation_deg * std::numbers::pi / 180.0;
  const Eigen::Matrix3d R = Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();

  Eigen::Matrix3d S = Eigen::Matrix3d::Zero();
  for (int a = 0; a < 3; ++a) S(a, a) = unit(rng) * cfg.max_log_scale;
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b) S(a, b) = S(b, a) = unit(rng) * cfg.max_shear;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(S);
  const Eigen::Matrix3d expS =
      es.eigenvectors() * es.eigenvalues().array().exp().matrix().asDiagonal() *
      es.eigenvectors().transpose();

  Eigen::Vector3d shift;
  const Eigen::Vector3d ext = meta.extent();
  for (int a = 0; a < 3; ++a) shift[a] = unit(rng) * cfg.max_translation_frac * ext[a];

  AffineParams p;
  p.A = R * expS;
  const Eigen::Vector3d c = meta.center();
  p.t = c + shift - p.A * c;
  if (cfg.max_rotation_deg == 0 && cfg.max_log_scale == 0 && cfg.max_shear == 0 &&
      cfg.max_translation_frac == 0)
    return AffineParams::identity();
  return p;
}

/// du_c/dx_d at a voxel: central differences inside, one-sided on faces.
template <typename Scalar>
Eigen::Matrix3d displacement_jacobian(const VectorGrid<Scalar>& u, int i, int j, int k) {
  const GridMeta& m = u.meta;
  const std::array<int, 3> p{i, j, k};
  Eigen::Matrix3d J = Eigen::Matrix3d::Zero();
  for (int d = 0; d < 3; ++d) {
    const int n = m.dims[d];
    if (n < 2) continue;
    std::array<int, 3> lo = p, hi = p;
    double h = m.spacing[d];
    if (p[d] == 0) {
      hi[d] = 1;
    } else if (p[d] == n - 1) {
      lo[d] = n - 2;
    } else {
      lo[d] -= 1;
      hi[d] += 1;
      h *= 2.0;
    }
    const std::size_t a = m.index(lo[0], lo[1], lo[2]), b = m.index(hi[0], hi[1], hi[2]);
    for (int c = 0; c < 3; ++c)
      J(c, d) = (static_cast<double>(u.component(c)[b]) - static_cast<double>(u.component(c)[a])) / h;
  }
  return J;
}

/// det(I + du/dx) per voxel.
template <typename Scalar>
BasicVolume<Scalar> jacobian_determinant_map(const VectorGrid<Scalar>& u) {
  const GridMeta& m = u.meta;
  BasicVolume<Scalar> out(m);
  std::size_t v = 0;
  for (int k = 0; k < m.dims[2]; ++k)
    for (int j = 0; j < m.dims[1]; ++j)
      for (int i = 0; i < m.dims[0]; ++i, ++v)
        out.data[v] = static_cast<Scalar>(
            (Eigen::Matrix3d::Identity() + displacement_jacobian(u, i, j, k)).determinant());
  return out;
}

template <typename Scalar>
BasicVolume<Scalar> displacement_magnitude_map(const VectorGrid<Scalar>& u) {
  BasicVolume<Scalar> out(u.meta);
  for (std::size_t v = 0; v < u.voxels(); ++v) out.data[v] = u.at(v).norm();
  return out;
}

/// Frobenius norm of du/dx per voxel.
template <typename Scalar>
BasicVolume<Scalar> gradient_l2norm_map(const VectorGrid<Scalar>& u) {
  const GridMeta& m = u.meta;
  BasicVolume<Scalar> out(m);
  std::size_t v = 0;
  for (int k = 0; k < m.dims[2]; ++k)
    for (int j = 0; j < m.dims[1]; ++j)
      for (int i = 0; i < m.dims[0]; ++i, ++v)
        out.data[v] = static_cast<Scalar>(displacement_jacobian(u, i, j, k).norm());
  return out;
}

}  // namespace weakreg

#endif  // WEAKREG_SPATIAL_HPP_

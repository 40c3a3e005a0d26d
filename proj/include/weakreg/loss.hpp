#ifndef WEAKREG_LOSS_HPP_
#define WEAKREG_LOSS_HPP_

#include "weakreg/grid.hpp"
#include "weakreg/separable.hpp"

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace weakreg {

/// Gaussian scales (mm) for the multiscale label similarity.
struct MultiscaleConfig {
  std::vector<double> sigmas{0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0};
  /// Kernel half-width in units of sigma.
  double truncation = 3.0;

  void validate() const {
    if (sigmas.empty()) throw std::invalid_argument("multiscale config needs at least one sigma");
    for (double s : sigmas)
      if (!(s >= 0.0) || !std::isfinite(s)) throw std::invalid_argument("sigma must be finite and >= 0");
    if (!(truncation > 0.0)) throw std::invalid_argument("truncation must be > 0");
  }
};

/// Sampled, renormalised Gaussian with radius ceil(truncation * sigma).
/// sigma = 0 is the unit impulse.
inline Eigen::VectorXd gaussian_kernel(double sigma_vox, double truncation = 3.0) {
  if (sigma_vox <= 0.0) return Eigen::VectorXd::Ones(1);
  const int r = static_cast<int>(std::ceil(truncation * sigma_vox));
  Eigen::VectorXd k(2 * r + 1);
  for (int t = -r; t <= r; ++t) k[t + r] = std::exp(-0.5 * (t * t) / (sigma_vox * sigma_vox));
  return k / k.sum();
}

/// Dense n x n matrix of a 1D convolution with clamp-to-edge borders: taps
/// falling outside [0, n) read the nearest edge sample.
template <typename Scalar>
MatrixX<Scalar> clamped_convolution_operator(const Eigen::VectorXd& kernel, int n) {
  const int r = static_cast<int>(kernel.size() / 2);
  Eigen::MatrixXd op = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int t = -r; t <= r; ++t) op(i, std::clamp(i + t, 0, n - 1)) += kernel[t + r];
  return op.cast<Scalar>();
}

/// Precomputed per-scale, per-axis filter operators for one grid.
template <typename Scalar>
class MultiscaleFilter {
 public:
  MultiscaleFilter(MultiscaleConfig cfg, const GridMeta& meta) : cfg_(std::move(cfg)), meta_(meta) {
    cfg_.validate();
    for (double s : cfg_.sigmas) {
      Scale sc;
      sc.identity = (s == 0.0);
      if (!sc.identity)
        for (int a = 0; a < 3; ++a)
          sc.ops[a] = clamped_convolution_operator<Scalar>(
              gaussian_kernel(s / meta.spacing[a], cfg_.truncation), meta.dims[a]);
      scales_.push_back(std::move(sc));
    }
  }

  int scales() const { return static_cast<int>(scales_.size()); }
  const MultiscaleConfig& config() const { return cfg_; }
  const GridMeta& meta() const { return meta_; }

  std::vector<Scalar> apply(int scale, std::span<const Scalar> in) const {
    check(in.size());
    const Scale& s = scales_.at(scale);
    if (s.identity) return {in.begin(), in.end()};
    return apply_separable<Scalar>(in, meta_.dims, {&s.ops[0], &s.ops[1], &s.ops[2]});
  }

  std::vector<Scalar> adjoint(int scale, std::span<const Scalar> in) const {
    check(in.size());
    const Scale& s = scales_.at(scale);
    if (s.identity) return {in.begin(), in.end()};
    return apply_separable_adjoint<Scalar>(in, meta_.dims, {&s.ops[0], &s.ops[1], &s.ops[2]});
  }

  const MatrixX<Scalar>& axis_operator(int scale, int axis) const { return scales_.at(scale).ops[axis]; }

 private:
  struct Scale {
    bool identity = true;
    std::array<MatrixX<Scalar>, 3> ops;
  };

  void check(std::size_t n) const {
    if (n != meta_.voxel_count()) throw GridError("multiscale filter: grid size mismatch");
  }

  MultiscaleConfig cfg_;
  GridMeta meta_;
  std::vector<Scale> scales_;
};

/// Separable Gaussian smoothing with isotropic sigma in mm.
template <typename Scalar, typename Tag>
ScalarGrid<Scalar, Tag> gaussian_filter(const ScalarGrid<Scalar, Tag>& l, double sigma_mm,
                                        double truncation = 3.0) {
  MultiscaleFilter<Scalar> f(MultiscaleConfig{{sigma_mm}, truncation}, l.meta);
  return ScalarGrid<Scalar, Tag>(l.meta, f.apply(0, l.data));
}

template <typename Scalar>
struct PairGradient {
  Scalar value = 0;
  std::vector<Scalar> d_a;
  std::vector<Scalar> d_b;
};

/// 2 sum(a b) / (sum a + sum b). Both-empty pairs score 1 with zero gradient.
template <typename Scalar>
Scalar soft_dice(std::span<const Scalar> a, std::span<const Scalar> b) {
  if (a.size() != b.size()) throw GridError("soft_dice: size mismatch");
  double ab = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    sa += a[i];
    sb += b[i];
  }
  const double s = sa + sb;
  if (s <= 0.0) return Scalar(1);
  return static_cast<Scalar>(2.0 * ab / s);
}

template <typename Scalar>
PairGradient<Scalar> soft_dice_with_gradient(std::span<const Scalar> a, std::span<const Scalar> b) {
  if (a.size() != b.size()) throw GridError("soft_dice: size mismatch");
  PairGradient<Scalar> r;
  r.d_a.assign(a.size(), Scalar(0));
  r.d_b.assign(a.size(), Scalar(0));
  double ab = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    sa += a[i];
    sb += b[i];
  }
  const double s = sa + sb;
  if (s <= 0.0) {
    r.value = Scalar(1);
    return r;
  }
  r.value = static_cast<Scalar>(2.0 * ab / s);
  const double inv2 = 1.0 / (s * s);
  for (std::size_t i = 0; i < a.size(); ++i) {
    r.d_a[i] = static_cast<Scalar>(2.0 * (b[i] * s - ab) * inv2);
    r.d_b[i] = static_cast<Scalar>(2.0 * (a[i] * s - ab) * inv2);
  }
  return r;
}

template <typename Scalar, typename Tag>
Scalar soft_dice(const ScalarGrid<Scalar, Tag>& a, const ScalarGrid<Scalar, Tag>& b) {
  if (a.meta != b.meta) throw GridError("soft_dice: grid meta mismatch");
  return soft_dice<Scalar>(a.data, b.data);
}

inline constexpr double kCrossEntropyClip = 1e-6;

/// sum_i [p(a_i) log p(b_i) + (1 - p(a_i)) log(1 - p(b_i))], b clipped to
/// [eps, 1 - eps]. Gradients: d_b is zero where the clip is active.
template <typename Scalar>
PairGradient<Scalar> cross_entropy_with_gradient(std::span<const Scalar> a, std::span<const Scalar> b,
                                                 double eps = kCrossEntropyClip) {
  if (a.size() != b.size()) throw GridError("cross_entropy: size mismatch");
  PairGradient<Scalar> r;
  r.d_a.resize(a.size());
  r.d_b.resize(a.size());
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double bi = static_cast<double>(b[i]);
    const double bc = std::clamp(bi, eps, 1.0 - eps);
    const double ai = static_cast<double>(a[i]);
    const double lb = std::log(bc), l1b = std::log(1.0 - bc);
    acc += ai * lb + (1.0 - ai) * l1b;
    r.d_a[i] = static_cast<Scalar>(lb - l1b);
    r.d_b[i] = (bi < eps || bi > 1.0 - eps) ? Scalar(0)
                                            : static_cast<Scalar>(ai / bc - (1.0 - ai) / (1.0 - bc));
  }
  r.value = static_cast<Scalar>(acc);
  return r;
}

/// Result of a multiscale similarity between a fixed and a warped label.
template <typename Scalar>
struct MultiscaleValue {
  Scalar value = 0;
  std::vector<Scalar> per_scale;
  std::vector<Scalar> d_fixed;   // empty unless requested
  std::vector<Scalar> d_warped;
};

enum class SimilarityKind { dice, cross_entropy };

namespace detail {

template <typename Scalar>
MultiscaleValue<Scalar> multiscale_similarity(std::span<const Scalar> fixed, std::span<const Scalar> warped,
                                              const MultiscaleFilter<Scalar>& filter, SimilarityKind kind,
                                              bool want_fixed_grad) {
  const int Z = filter.scales();
  MultiscaleValue<Scalar> r;
  r.d_warped.assign(warped.size(), Scalar(0));
  if (want_fixed_grad) r.d_fixed.assign(fixed.size(), Scalar(0));
  double total = 0;
  for (int s = 0; s < Z; ++s) {
    const auto fa = filter.apply(s, fixed);
    const auto fb = filter.apply(s, warped);
    auto pg = kind == SimilarityKind::dice ? soft_dice_with_gradient<Scalar>(fa, fb)
                                           : cross_entropy_with_gradient<Scalar>(fa, fb);
    r.per_scale.push_back(pg.value);
    total += pg.value;
    const auto gb = filter.adjoint(s, pg.d_b);
    for (std::size_t i = 0; i < gb.size(); ++i) r.d_warped[i] += gb[i] / Scalar(Z);
    if (want_fixed_grad) {
      const auto ga = filter.adjoint(s, pg.d_a);
      for (std::size_t i = 0; i < ga.size(); ++i) r.d_fixed[i] += ga[i] / Scalar(Z);
    }
  }
  r.value = static_cast<Scalar>(total / Z);
  return r;
}

}  // namespace detail

/// Mean over scales of the soft Dice between Gaussian-filtered labels.
template <typename Scalar>
MultiscaleValue<Scalar> multiscale_dice(std::span<const Scalar> fixed, std::span<const Scalar> warped,
                                        const MultiscaleFilter<Scalar>& filter, bool want_fixed_grad = false) {
  return detail::multiscale_similarity(fixed, warped, filter, SimilarityKind::dice, want_fixed_grad);
}

template <typename Scalar>
MultiscaleValue<Scalar> multiscale_dice(const BasicLabelMask<Scalar>& fixed, const BasicLabelMask<Scalar>& warped,
                                        const MultiscaleFilter<Scalar>& filter, bool want_fixed_grad = false) {
  if (fixed.meta != warped.meta) throw GridError("multiscale_dice: grid meta mismatch");
  return multiscale_dice<Scalar>(fixed.data, warped.data, filter, want_fixed_grad);
}

/// Mean over scales of the (negative) cross-entropy between filtered labels.
template <typename Scalar>
MultiscaleValue<Scalar> multiscale_cross_entropy(std::span<const Scalar> fixed, std::span<const Scalar> warped,
                                                 const MultiscaleFilter<Scalar>& filter,
                                                 bool want_fixed_grad = false) {
  return detail::multiscale_similarity(fixed, warped, filter, SimilarityKind::cross_entropy, want_fixed_grad);
}

template <typename Scalar>
MultiscaleValue<Scalar> multiscale_cross_entropy(const BasicLabelMask<Scalar>& fixed,
                                                 const BasicLabelMask<Scalar>& warped,
                                                 const MultiscaleFilter<Scalar>& filter,
                                                 bool want_fixed_grad = false) {
  if (fixed.meta != warped.meta) throw GridError("multiscale_cross_entropy: grid meta mismatch");
  return multiscale_cross_entropy<Scalar>(fixed.data, warped.data, filter, want_fixed_grad);
}

/// Similarity over already-filtered stacks (one fixed/warped array per
/// scale), used when labels are filtered before warping.
template <typename Scalar>
MultiscaleValue<Scalar> stacked_similarity(const std::vector<std::vector<Scalar>>& fixed,
                                           const std::vector<std::vector<Scalar>>& warped, SimilarityKind kind) {
  if (fixed.size() != warped.size() || fixed.empty()) throw GridError("stacked_similarity: stack mismatch");
  const int Z = static_cast<int>(fixed.size());
  MultiscaleValue<Scalar> r;
  double total = 0;
  r.d_warped.clear();
  for (int s = 0; s < Z; ++s) {
    auto pg = kind == SimilarityKind::dice ? soft_dice_with_gradient<Scalar>(fixed[s], warped[s])
                                           : cross_entropy_with_gradient<Scalar>(fixed[s], warped[s]);
    r.per_scale.push_back(pg.value);
    total += pg.value;
    // Per-scale warped gradients are concatenated; each scale warps its own stack.
    for (auto g : pg.d_b) r.d_warped.push_back(g / Scalar(Z));
  }
  r.value = static_cast<Scalar>(total / Z);
  return r;
}

template <typename Scalar>
struct RegularizerValue {
  Scalar value = 0;
  VectorGrid<Scalar> grad;
};

namespace detail {

/// One finite-difference term: factor * sum_t coeff_t * u[v + offset_t],
/// with small integer coefficients so constant offsets cancel exactly.
struct StencilTerm {
  double weight;
  double factor;
  std::vector<std::pair<std::array<int, 3>, double>> taps;
};

template <typename Scalar>
RegularizerValue<Scalar> interior_quadratic(const VectorGrid<Scalar>& u, const std::vector<StencilTerm>& terms,
                                            double normaliser) {
  const GridMeta& m = u.meta;
  for (int a = 0; a < 3; ++a)
    if (m.dims[a] < 3) throw GridError("regularizer needs at least 3 voxels per axis");
  RegularizerValue<Scalar> r{Scalar(0), VectorGrid<Scalar>(m)};
  const double count = static_cast<double>(m.dims[0] - 2) * (m.dims[1] - 2) * (m.dims[2] - 2);
  const double scale = 1.0 / (count * normaliser);
  const std::ptrdiff_t sy = m.dims[0], sz = static_cast<std::ptrdiff_t>(m.dims[0]) * m.dims[1];
  std::vector<std::vector<std::pair<std::ptrdiff_t, double>>> flat;
  std::vector<double> factor;
  for (const auto& t : terms) {
    std::vector<std::pair<std::ptrdiff_t, double>> f;
    for (const auto& [o, c] : t.taps) f.emplace_back(o[0] + o[1] * sy + o[2] * sz, c);
    flat.push_back(std::move(f));
    factor.push_back(t.factor);
  }
  double acc = 0;
  for (int c = 0; c < 3; ++c) {
    const Scalar* uc = u.component(c);
    Scalar* gc = r.grad.component(c);
    for (int k = 1; k < m.dims[2] - 1; ++k)
      for (int j = 1; j < m.dims[1] - 1; ++j)
        for (int i = 1; i < m.dims[0] - 1; ++i) {
          const std::ptrdiff_t v = i + j * sy + k * sz;
          for (std::size_t t = 0; t < terms.size(); ++t) {
            double q = 0;
            for (const auto& [off, coeff] : flat[t]) q += coeff * static_cast<double>(uc[v + off]);
            q *= factor[t];
            acc += terms[t].weight * q * q;
            const double g = 2.0 * terms[t].weight * q * scale * factor[t];
            for (const auto& [off, coeff] : flat[t]) gc[v + off] += static_cast<Scalar>(g * coeff);
          }
        }
  }
  r.value = static_cast<Scalar>(acc * scale);
  return r;
}

}  // namespace detail

/// Mean over interior voxels and the three components of
/// u_xx^2 + u_yy^2 + u_zz^2 + 2 u_xy^2 + 2 u_xz^2 + 2 u_yz^2 (central
/// differences, physical units).
template <typename Scalar>
RegularizerValue<Scalar> bending_energy(const VectorGrid<Scalar>& u) {
  const Eigen::Vector3d h = u.meta.spacing;
  std::vector<detail::StencilTerm> terms;
  for (int a = 0; a < 3; ++a) {
    std::array<int, 3> p{0, 0, 0}, n{0, 0, 0};
    p[a] = 1;
    n[a] = -1;
    const double w = 1.0 / (h[a] * h[a]);
    terms.push_back({1.0, w, {{p, 1.0}, {{0, 0, 0}, -2.0}, {n, 1.0}}});
  }
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b) {
      const double w = 1.0 / (4.0 * h[a] * h[b]);
      auto off = [&](int sa, int sb) {
        std::array<int, 3> o{0, 0, 0};
        o[a] = sa;
        o[b] = sb;
        return o;
      };
      terms.push_back({2.0, w, {{off(1, 1), 1.0}, {off(1, -1), -1.0}, {off(-1, 1), -1.0}, {off(-1, -1), 1.0}}});
    }
  return detail::interior_quadratic(u, terms, 3.0);
}

/// Mean over interior voxels of the squared Frobenius norm of du/dx.
template <typename Scalar>
RegularizerValue<Scalar> l2_gradient_penalty(const VectorGrid<Scalar>& u) {
  const Eigen::Vector3d h = u.meta.spacing;
  std::vector<detail::StencilTerm> terms;
  for (int a = 0; a < 3; ++a) {
    std::array<int, 3> p{0, 0, 0}, n{0, 0, 0};
    p[a] = 1;
    n[a] = -1;
    const double w = 1.0 / (2.0 * h[a]);
    terms.push_back({1.0, w, {{p, 1.0}, {n, -1.0}}});
  }
  return detail::interior_quadratic(u, terms, 1.0);
}

enum class RegularizerKind { bending, l2_gradient };

template <typename Scalar>
RegularizerValue<Scalar> regularizer(const VectorGrid<Scalar>& u, RegularizerKind kind) {
  return kind == RegularizerKind::bending ? bending_energy(u) : l2_gradient_penalty(u);
}

inline constexpr double kBaselineAlpha = 0.5;

/// -J + alpha * Omega.
inline double total_loss(double similarity, double regularizer_value, double alpha = kBaselineAlpha) {
  if (!(alpha >= 0.0)) throw std::invalid_argument("alpha must be >= 0");
  return -similarity + alpha * regularizer_value;
}

struct LossReport {
  double similarity = 0;
  double regularizer = 0;
  double alpha = kBaselineAlpha;
  double total = 0;
  std::vector<double> per_scale;
};

}  // namespace weakreg

#endif  // WEAKREG_LOSS_HPP_

#ifndef WEAKREG_INTENSITY_HPP_
#define WEAKREG_INTENSITY_HPP_

#include "weakreg/grid.hpp"

#include <cmath>

namespace weakreg {

class EmptyLabelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kVarianceGuard = 1e-12;

/// Zero-mean, unit population-variance rescaling. Constant input maps to zeros.
template <typename Scalar, typename Tag>
ScalarGrid<Scalar, Tag> normalize_intensity(const ScalarGrid<Scalar, Tag>& v) {
  if (v.size() < 2) throw GridError("normalize_intensity needs at least 2 voxels");
  if (!all_finite(v.data)) throw GridError("normalize_intensity: non-finite input value");

  const Eigen::VectorXd x = v.vec().template cast<double>();
  const double mean = x.mean();
  const double var = (x.array() - mean).square().mean();
  const double sd = std::sqrt(var);

  ScalarGrid<Scalar, Tag> out(v.meta);
  if (sd < kVarianceGuard) return out;
  out.vec() = ((x.array() - mean) / sd).template cast<Scalar>().matrix();
  return out;
}

/// Probability-weighted centre of mass in physical mm.
template <typename Scalar>
Eigen::Vector3d centroid(const ScalarGrid<Scalar, LabelTag>& l) {
  const auto& m = l.meta;
  double mass = 0.0;
  Eigen::Vector3d acc = Eigen::Vector3d::Zero();
  std::size_t v = 0;
  for (int k = 0; k < m.dims[2]; ++k)
    for (int j = 0; j < m.dims[1]; ++j)
      for (int i = 0; i < m.dims[0]; ++i, ++v) {
        const double p = static_cast<double>(l.data[v]);
        if (p == 0.0) continue;
        mass += p;
        acc += p * Eigen::Vector3d(i, j, k);
      }
  if (!(mass > 0.0)) throw EmptyLabelError("centroid of an empty label mask");
  return (acc / mass).cwiseProduct(m.spacing);
}

}  // namespace weakreg

#endif  // WEAKREG_INTENSITY_HPP_

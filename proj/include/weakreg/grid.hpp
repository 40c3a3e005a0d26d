#ifndef WEAKREG_GRID_HPP_
#define WEAKREG_GRID_HPP_

#include <Eigen/Core>
#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace weakreg {

class GridError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Voxel counts and physical spacing (mm) of a regular 3D grid whose origin is
/// the centre of voxel (0,0,0). Linear order is x-fastest.
struct GridMeta {
  std::array<int, 3> dims{1, 1, 1};
  Eigen::Vector3d spacing = Eigen::Vector3d::Constant(0.8);

  GridMeta() = default;
  GridMeta(std::array<int, 3> d, Eigen::Vector3d s) : dims(d), spacing(std::move(s)) {}
  GridMeta(std::array<int, 3> d, double isotropic)
      : dims(d), spacing(Eigen::Vector3d::Constant(isotropic)) {}

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(j) +
                                                static_cast<std::size_t>(dims[1]) * k);
  }

  Eigen::Vector3d position(int i, int j, int k) const {
    return {i * spacing.x(), j * spacing.y(), k * spacing.z()};
  }

  Eigen::Vector3d extent() const {
    return {dims[0] * spacing.x(), dims[1] * spacing.y(), dims[2] * spacing.z()};
  }

  Eigen::Vector3d center() const {
    return {0.5 * (dims[0] - 1) * spacing.x(), 0.5 * (dims[1] - 1) * spacing.y(),
            0.5 * (dims[2] - 1) * spacing.z()};
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw GridError("grid dims must be >= 1");
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
        throw GridError("grid spacing must be finite and > 0");
    }
  }

  friend bool operator==(const GridMeta& a, const GridMeta& b) {
    return a.dims == b.dims && a.spacing == b.spacing;
  }
  friend bool operator!=(const GridMeta& a, const GridMeta& b) { return !(a == b); }
};

/// Meta of the grid obtained by downsampling `full` by 2^level: dims are
/// ceil(n / 2^level) and spacing is scaled accordingly.
inline GridMeta level_meta(const GridMeta& full, int level) {
  GridMeta m = full;
  const int f = 1 << level;
  for (int a = 0; a < 3; ++a) m.dims[a] = (full.dims[a] + f - 1) / f;
  m.spacing = full.spacing * static_cast<double>(f);
  return m;
}

struct VolumeTag {};
struct LabelTag {};

/// Single-channel scalar grid. Tag separates intensity volumes from label
/// masks at the type level while sharing storage and operators.
template <typename Scalar, typename Tag>
struct ScalarGrid {
  using scalar_type = Scalar;
  using tag_type = Tag;
  using VectorType = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  GridMeta meta;
  std::vector<Scalar> data;

  ScalarGrid() = default;
  explicit ScalarGrid(GridMeta m, Scalar fill = Scalar(0))
      : meta(std::move(m)), data(meta.voxel_count(), fill) {
    meta.validate();
  }
  ScalarGrid(GridMeta m, std::vector<Scalar> d) : meta(std::move(m)), data(std::move(d)) {
    meta.validate();
    if (data.size() != meta.voxel_count())
      throw GridError("scalar grid payload length does not match dims");
  }

  std::size_t size() const { return data.size(); }
  Scalar& operator()(int i, int j, int k) { return data[meta.index(i, j, k)]; }
  Scalar operator()(int i, int j, int k) const { return data[meta.index(i, j, k)]; }

  Eigen::Map<VectorType> vec() { return {data.data(), static_cast<Eigen::Index>(data.size())}; }
  Eigen::Map<const VectorType> vec() const {
    return {data.data(), static_cast<Eigen::Index>(data.size())};
  }
};

/// Three-component vector grid, channel-major (all x components, then y, then z).
template <typename Scalar>
struct VectorGrid {
  using scalar_type = Scalar;
  using VectorType = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  GridMeta meta;
  std::vector<Scalar> data;

  VectorGrid() = default;
  explicit VectorGrid(GridMeta m, Scalar fill = Scalar(0))
      : meta(std::move(m)), data(3 * meta.voxel_count(), fill) {
    meta.validate();
  }
  VectorGrid(GridMeta m, std::vector<Scalar> d) : meta(std::move(m)), data(std::move(d)) {
    meta.validate();
    if (data.size() != 3 * meta.voxel_count())
      throw GridError("vector grid payload length must be 3 * voxel count");
  }

  std::size_t voxels() const { return meta.voxel_count(); }
  Scalar* component(int c) { return data.data() + c * voxels(); }
  const Scalar* component(int c) const { return data.data() + c * voxels(); }

  Eigen::Matrix<Scalar, 3, 1> at(std::size_t v) const {
    const std::size_t n = voxels();
    return {data[v], data[n + v], data[2 * n + v]};
  }
  void set(std::size_t v, const Eigen::Matrix<Scalar, 3, 1>& u) {
    const std::size_t n = voxels();
    data[v] = u.x();
    data[n + v] = u.y();
    data[2 * n + v] = u.z();
  }

  Eigen::Map<VectorType> vec() { return {data.data(), static_cast<Eigen::Index>(data.size())}; }
  Eigen::Map<const VectorType> vec() const {
    return {data.data(), static_cast<Eigen::Index>(data.size())};
  }
};

template <typename Scalar = float>
using BasicVolume = ScalarGrid<Scalar, VolumeTag>;
template <typename Scalar = float>
using BasicLabelMask = ScalarGrid<Scalar, LabelTag>;
template <typename Scalar = float>
using BasicDisplacementField = VectorGrid<Scalar>;

using Volume = BasicVolume<float>;
using LabelMask = BasicLabelMask<float>;
using DisplacementField = BasicDisplacementField<float>;

template <typename To, typename From, typename Tag>
ScalarGrid<To, Tag> cast(const ScalarGrid<From, Tag>& g) {
  std::vector<To> d(g.data.begin(), g.data.end());
  return ScalarGrid<To, Tag>(g.meta, std::move(d));
}

template <typename To, typename From>
VectorGrid<To> cast(const VectorGrid<From>& g) {
  std::vector<To> d(g.data.begin(), g.data.end());
  return VectorGrid<To>(g.meta, std::move(d));
}

/// Re-tag a scalar grid (e.g. treat a warped intensity volume as a label map).
template <typename ToTag, typename Scalar, typename FromTag>
ScalarGrid<Scalar, ToTag> retag(ScalarGrid<Scalar, FromTag> g) {
  return ScalarGrid<Scalar, ToTag>(g.meta, std::move(g.data));
}

template <typename Range>
bool all_finite(const Range& r) {
  for (auto v : r)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

/// 3x3 linear part and translation (mm) acting on physical coordinates:
/// x -> A x + t.
struct AffineParams {
  Eigen::Matrix3d A = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  static AffineParams identity() { return {}; }

  /// Row-major A followed by t.
  std::array<double, 12> to_array() const {
    std::array<double, 12> p{};
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) p[3 * r + c] = A(r, c);
    for (int r = 0; r < 3; ++r) p[9 + r] = t[r];
    return p;
  }

  template <typename Container>
  static AffineParams from_array(const Container& p) {
    AffineParams a;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) a.A(r, c) = static_cast<double>(p[3 * r + c]);
    for (int r = 0; r < 3; ++r) a.t[r] = static_cast<double>(p[9 + r]);
    return a;
  }

  Eigen::Vector3d apply(const Eigen::Vector3d& x) const { return A * x + t; }

  /// (outer ∘ inner)(x) = outer(inner(x)).
  friend AffineParams operator*(const AffineParams& outer, const AffineParams& inner) {
    return {outer.A * inner.A, outer.A * inner.t + outer.t};
  }
};

}  // namespace weakreg

#endif  // WEAKREG_GRID_HPP_

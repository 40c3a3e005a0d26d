#ifndef WEAKREG_SEPARABLE_HPP_
#define WEAKREG_SEPARABLE_HPP_

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace weakreg {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Applies the 1D linear operator `op` (rows = output length, cols = input
/// length) along one axis of an x-fastest 3D array. Each axis reduces to a
/// single GEMM over contiguous lines or slices.
template <typename Scalar>
std::vector<Scalar> apply_along_axis(std::span<const Scalar> in, const std::array<int, 3>& dims,
                                     int axis, const MatrixX<Scalar>& op,
                                     std::array<int, 3>* out_dims = nullptr) {
  if (op.cols() != dims[axis]) throw std::invalid_argument("axis operator size mismatch");
  const Eigen::Index nx = dims[0], ny = dims[1], nz = dims[2];
  std::array<int, 3> od = dims;
  od[axis] = static_cast<int>(op.rows());
  std::vector<Scalar> out(static_cast<std::size_t>(od[0]) * od[1] * od[2]);

  using CMap = Eigen::Map<const MatrixX<Scalar>>;
  using Map = Eigen::Map<MatrixX<Scalar>>;
  if (axis == 0) {
    Map(out.data(), od[0], ny * nz).noalias() = op * CMap(in.data(), nx, ny * nz);
  } else if (axis == 1) {
    for (Eigen::Index z = 0; z < nz; ++z) {
      CMap slice(in.data() + z * nx * ny, nx, ny);
      Map(out.data() + z * nx * od[1], nx, od[1]).noalias() = slice * op.transpose();
    }
  } else {
    Map(out.data(), nx * ny, od[2]).noalias() = CMap(in.data(), nx * ny, nz) * op.transpose();
  }
  if (out_dims) *out_dims = od;
  return out;
}

/// Applies one operator per axis (x, then y, then z).
template <typename Scalar>
std::vector<Scalar> apply_separable(std::span<const Scalar> in, std::array<int, 3> dims,
                                    const std::array<const MatrixX<Scalar>*, 3>& ops,
                                    std::array<int, 3>* out_dims = nullptr) {
  std::vector<Scalar> cur(in.begin(), in.end());
  for (int a = 0; a < 3; ++a) {
    std::array<int, 3> next{};
    cur = apply_along_axis<Scalar>(cur, dims, a, *ops[a], &next);
    dims = next;
  }
  if (out_dims) *out_dims = dims;
  return cur;
}

/// Adjoint of apply_separable: transposed operators, same axis order (the
/// axis operators act on disjoint indices, so order does not matter).
template <typename Scalar>
std::vector<Scalar> apply_separable_adjoint(std::span<const Scalar> in, std::array<int, 3> dims,
                                            const std::array<const MatrixX<Scalar>*, 3>& ops,
                                            std::array<int, 3>* out_dims = nullptr) {
  std::vector<Scalar> cur(in.begin(), in.end());
  for (int a = 0; a < 3; ++a) {
    std::array<int, 3> next{};
    const MatrixX<Scalar> t = ops[a]->transpose();
    cur = apply_along_axis<Scalar>(cur, dims, a, t, &next);
    dims = next;
  }
  if (out_dims) *out_dims = dims;
  return cur;
}

/// Linear-interpolation upsampling operator from `coarse` to `fine` samples
/// with integer `factor`, using voxel-centre alignment and clamped borders:
/// fine index j reads coarse coordinate (j + 0.5) / factor - 0.5.
template <typename Scalar>
MatrixX<Scalar> upsample_operator(int coarse, int fine, int factor) {
  MatrixX<Scalar> op = MatrixX<Scalar>::Zero(fine, coarse);
  for (int j = 0; j < fine; ++j) {
    double c = (j + 0.5) / factor - 0.5;
    c = std::clamp(c, 0.0, static_cast<double>(coarse - 1));
    const int i0 = std::min(static_cast<int>(std::floor(c)), coarse - 1);
    const int i1 = std::min(i0 + 1, coarse - 1);
    const double w = c - i0;
    op(j, i0) += static_cast<Scalar>(1.0 - w);
    op(j, i1) += static_cast<Scalar>(w);
  }
  return op;
}

}  // namespace weakreg

#endif  // WEAKREG_SEPARABLE_HPP_

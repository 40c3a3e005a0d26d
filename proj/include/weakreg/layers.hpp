#ifndef WEAKREG_LAYERS_HPP_
#define WEAKREG_LAYERS_HPP_

#include "weakreg/separable.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <type_traits>
#include <vector>

namespace weakreg {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Multi-channel 3D feature map: one column per channel, each column an
/// x-fastest grid of dims[0] * dims[1] * dims[2] values.
template <typename Scalar>
struct FeatureMap {
  std::array<int, 3> dims{1, 1, 1};
  MatrixX<Scalar> data;

  FeatureMap() = default;
  FeatureMap(std::array<int, 3> d, Eigen::Index channels)
      : dims(d), data(MatrixX<Scalar>::Zero(static_cast<Eigen::Index>(d[0]) * d[1] * d[2], channels)) {}
  FeatureMap(std::array<int, 3> d, MatrixX<Scalar> m) : dims(d), data(std::move(m)) {
    if (data.rows() != voxels()) throw ShapeError("feature map rows must equal voxel count");
  }

  Eigen::Index voxels() const { return static_cast<Eigen::Index>(dims[0]) * dims[1] * dims[2]; }
  Eigen::Index channels() const { return data.cols(); }
};

/// Layer primitives with exact reverse-mode gradients. Backward functions
/// accumulate (+=) into parameter gradients and return the input gradient.
namespace layers {

namespace detail {

/// Copies (or, when `add` is set, accumulates back) the zero-padded shifted
/// input channel for tap offset (ox, oy, oz).
template <typename Scalar, bool Scatter>
void shift_copy(const std::array<int, 3>& d, const Scalar* src, Scalar* dst, int ox, int oy, int oz) {
  const int nx = d[0], ny = d[1], nz = d[2];
  const int x0 = std::max(0, -ox), x1 = std::min(nx, nx - ox);
  if (x1 <= x0) return;
  for (int z = std::max(0, -oz); z < std::min(nz, nz - oz); ++z)
    for (int y = std::max(0, -oy); y < std::min(ny, ny - oy); ++y) {
      const std::ptrdiff_t out_row = (static_cast<std::ptrdiff_t>(z) * ny + y) * nx;
      const std::ptrdiff_t in_row = (static_cast<std::ptrdiff_t>(z + oz) * ny + (y + oy)) * nx + ox;
      if constexpr (Scatter) {
        // dst is the input gradient, src the column gradient.
        for (int x = x0; x < x1; ++x) dst[in_row + x] += src[out_row + x];
      } else {
        for (int x = x0; x < x1; ++x) dst[out_row + x] = src[in_row + x];
      }
    }
}

template <typename Scalar>
MatrixX<Scalar> im2col(const FeatureMap<Scalar>& x, int k) {
  const int r = k / 2;
  const Eigen::Index cin = x.channels(), V = x.voxels();
  MatrixX<Scalar> col = MatrixX<Scalar>::Zero(V, static_cast<Eigen::Index>(k) * k * k * cin);
  int tap = 0;
  for (int dz = 0; dz < k; ++dz)
    for (int dy = 0; dy < k; ++dy)
      for (int dx = 0; dx < k; ++dx, ++tap)
        for (Eigen::Index c = 0; c < cin; ++c)
          shift_copy<Scalar, false>(x.dims, x.data.col(c).data(), col.col(tap * cin + c).data(), dx - r, dy - r,
                                    dz - r);
  return col;
}

template <typename Scalar>
void col2im(const MatrixX<Scalar>& col, int k, FeatureMap<Scalar>& dx) {
  const int r = k / 2;
  const Eigen::Index cin = dx.channels();
  int tap = 0;
  for (int dz = 0; dz < k; ++dz)
    for (int dy = 0; dy < k; ++dy)
      for (int ddx = 0; ddx < k; ++ddx, ++tap)
        for (Eigen::Index c = 0; c < cin; ++c)
          shift_copy<Scalar, true>(dx.dims, col.col(tap * cin + c).data(), dx.data.col(c).data(), ddx - r, dy - r,
                                   dz - r);
}

}  // namespace detail

/// Same-size 3D convolution, zero padding, odd kernel k. Weight rows are
/// ordered (tap, input channel) with tap = (dz * k + dy) * k + dx.
template <typename Scalar>
FeatureMap<Scalar> conv3d(const FeatureMap<Scalar>& x, const MatrixX<Scalar>& w, int k,
                          const std::type_identity_t<VectorX<Scalar>>* bias = nullptr) {
  if (w.rows() != static_cast<Eigen::Index>(k) * k * k * x.channels())
    throw ShapeError("conv3d: weight rows do not match kernel and input channels");
  FeatureMap<Scalar> y(x.dims, w.cols());
  y.data.noalias() = detail::im2col(x, k) * w;
  if (bias) y.data.rowwise() += bias->transpose();
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> conv3d_backward(const FeatureMap<Scalar>& x, const MatrixX<Scalar>& w, int k,
                                   const MatrixX<Scalar>& dy, MatrixX<Scalar>& dw, std::type_identity_t<VectorX<Scalar>>* db = nullptr,
                                   bool need_input_grad = true) {
  const MatrixX<Scalar> col = detail::im2col(x, k);
  dw.noalias() += col.transpose() * dy;
  if (db) *db += dy.colwise().sum().transpose();
  FeatureMap<Scalar> dx(x.dims, x.channels());
  if (need_input_grad) {
    const MatrixX<Scalar> dcol = dy * w.transpose();
    detail::col2im(dcol, k, dx);
  }
  return dx;
}

template <typename Scalar>
struct BatchNormCache {
  MatrixX<Scalar> xhat;
  VectorX<Scalar> inv_std;
  VectorX<Scalar> batch_mean;
  VectorX<Scalar> batch_var;
  bool training = true;
};

/// Per-channel normalisation over all voxels. In training mode batch
/// statistics are used (and reported in the cache); otherwise the running
/// statistics.
template <typename Scalar>
FeatureMap<Scalar> batchnorm(const FeatureMap<Scalar>& x, const VectorX<Scalar>& gamma, const VectorX<Scalar>& beta,
                             const VectorX<Scalar>& running_mean, const VectorX<Scalar>& running_var, double eps,
                             bool training, std::type_identity_t<BatchNormCache<Scalar>>* cache) {
  const Eigen::Index C = x.channels();
  if (gamma.size() != C) throw ShapeError("batchnorm: channel mismatch");
  VectorX<Scalar> mean, var;
  if (training) {
    mean = x.data.colwise().mean().transpose();
    var = (x.data.rowwise() - mean.transpose()).array().square().colwise().mean().transpose();
  } else {
    mean = running_mean;
    var = running_var;
  }
  const VectorX<Scalar> inv_std = (var.array() + Scalar(eps)).rsqrt().matrix();
  MatrixX<Scalar> xhat = (x.data.rowwise() - mean.transpose()) * inv_std.asDiagonal();
  FeatureMap<Scalar> y(x.dims, C);
  y.data = (xhat * gamma.asDiagonal()).rowwise() + beta.transpose();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
    cache->batch_mean = mean;
    cache->batch_var = var;
    cache->training = training;
  }
  return y;
}

template <typename Scalar>
MatrixX<Scalar> batchnorm_backward(const BatchNormCache<Scalar>& c, const VectorX<Scalar>& gamma,
                                   const MatrixX<Scalar>& dy, VectorX<Scalar>& dgamma, VectorX<Scalar>& dbeta) {
  const VectorX<Scalar> sum_dy = dy.colwise().sum().transpose();
  const VectorX<Scalar> sum_dy_xhat = dy.cwiseProduct(c.xhat).colwise().sum().transpose();
  dgamma += sum_dy_xhat;
  dbeta += sum_dy;
  const VectorX<Scalar> scale = gamma.cwiseProduct(c.inv_std);
  if (!c.training) return dy * scale.asDiagonal();
  const Scalar n = static_cast<Scalar>(dy.rows());
  MatrixX<Scalar> dx = (dy * Scalar(n)).rowwise() - sum_dy.transpose();
  dx -= c.xhat * sum_dy_xhat.asDiagonal();
  return dx * (scale / n).asDiagonal();
}

template <typename Scalar>
FeatureMap<Scalar> relu(FeatureMap<Scalar> x) {
  x.data = x.data.cwiseMax(Scalar(0));
  return x;
}

/// Gradient of relu given its output.
template <typename Scalar>
MatrixX<Scalar> relu_backward(const FeatureMap<Scalar>& y, const MatrixX<Scalar>& dy) {
  return (y.data.array() > Scalar(0)).select(dy, Scalar(0));
}

/// 2x2x2 max-pooling with stride 2; `argmax` receives the winning input row
/// per output element (first maximum wins ties).
template <typename Scalar>
FeatureMap<Scalar> maxpool2(const FeatureMap<Scalar>& x, std::vector<std::int32_t>* argmax) {
  for (int a = 0; a < 3; ++a)
    if (x.dims[a] % 2 != 0) throw ShapeError("maxpool2: spatial dims must be even");
  const std::array<int, 3> od{x.dims[0] / 2, x.dims[1] / 2, x.dims[2] / 2};
  FeatureMap<Scalar> y(od, x.channels());
  if (argmax) argmax->assign(static_cast<std::size_t>(y.voxels() * x.channels()), 0);
  const int nx = x.dims[0], ny = x.dims[1];
  for (Eigen::Index c = 0; c < x.channels(); ++c) {
    const Scalar* in = x.data.col(c).data();
    Scalar* out = y.data.col(c).data();
    Eigen::Index o = 0;
    for (int k = 0; k < od[2]; ++k)
      for (int j = 0; j < od[1]; ++j)
        for (int i = 0; i < od[0]; ++i, ++o) {
          std::int32_t best = -1;
          Scalar bv = 0;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const std::int32_t idx = (2 * i + dx) + nx * ((2 * j + dy) + ny * (2 * k + dz));
                if (best < 0 || in[idx] > bv) {
                  best = idx;
                  bv = in[idx];
                }
              }
          out[o] = bv;
          if (argmax) (*argmax)[static_cast<std::size_t>(c * y.voxels() + o)] = best;
        }
  }
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> maxpool2_backward(const std::array<int, 3>& in_dims, const std::vector<std::int32_t>& argmax,
                                     const MatrixX<Scalar>& dy) {
  FeatureMap<Scalar> dx(in_dims, dy.cols());
  for (Eigen::Index c = 0; c < dy.cols(); ++c)
    for (Eigen::Index o = 0; o < dy.rows(); ++o)
      dx.data(argmax[static_cast<std::size_t>(c * dy.rows() + o)], c) += dy(o, c);
  return dx;
}

/// Transposed convolution, kernel 4, stride 2, padding 1: output dims are
/// exactly twice the input dims. Weight is cin x (64 * cout), column
/// tap * cout + co with tap = (tz * 4 + ty) * 4 + tx.
inline constexpr int kDeconvKernel = 4;

namespace detail {

/// Visits every (input voxel, tap, output voxel) triple of the stride-2
/// transposed convolution.
template <typename F>
void for_each_deconv_tap(const std::array<int, 3>& in, F&& f) {
  const std::array<int, 3> out{2 * in[0], 2 * in[1], 2 * in[2]};
  int tap = 0;
  for (int tz = 0; tz < kDeconvKernel; ++tz)
    for (int ty = 0; ty < kDeconvKernel; ++ty)
      for (int tx = 0; tx < kDeconvKernel; ++tx, ++tap)
        for (int k = 0; k < in[2]; ++k) {
          const int oz = 2 * k + tz - 1;
          if (oz < 0 || oz >= out[2]) continue;
          for (int j = 0; j < in[1]; ++j) {
            const int oy = 2 * j + ty - 1;
            if (oy < 0 || oy >= out[1]) continue;
            for (int i = 0; i < in[0]; ++i) {
              const int ox = 2 * i + tx - 1;
              if (ox < 0 || ox >= out[0]) continue;
              f(tap, i + in[0] * (j + in[1] * k), ox + out[0] * (oy + out[1] * oz));
            }
          }
        }
}

}  // namespace detail

template <typename Scalar>
FeatureMap<Scalar> deconv2(const FeatureMap<Scalar>& x, const MatrixX<Scalar>& w, const VectorX<Scalar>& bias) {
  const Eigen::Index cout = bias.size();
  constexpr int taps = kDeconvKernel * kDeconvKernel * kDeconvKernel;
  if (w.rows() != x.channels() || w.cols() != taps * cout) throw ShapeError("deconv2: weight shape mismatch");
  const MatrixX<Scalar> y = x.data * w;
  FeatureMap<Scalar> out({2 * x.dims[0], 2 * x.dims[1], 2 * x.dims[2]}, cout);
  for (Eigen::Index co = 0; co < cout; ++co) {
    Scalar* o = out.data.col(co).data();
    detail::for_each_deconv_tap(x.dims, [&](int tap, Eigen::Index vin, Eigen::Index vout) {
      o[vout] += y(vin, tap * cout + co);
    });
  }
  out.data.rowwise() += bias.transpose();
  return out;
}

template <typename Scalar>
FeatureMap<Scalar> deconv2_backward(const FeatureMap<Scalar>& x, const MatrixX<Scalar>& w, const MatrixX<Scalar>& dy,
                                    MatrixX<Scalar>& dw, VectorX<Scalar>& db) {
  const Eigen::Index cout = dy.cols();
  constexpr int taps = kDeconvKernel * kDeconvKernel * kDeconvKernel;
  MatrixX<Scalar> g = MatrixX<Scalar>::Zero(x.voxels(), taps * cout);
  for (Eigen::Index co = 0; co < cout; ++co) {
    const Scalar* d = dy.col(co).data();
    detail::for_each_deconv_tap(x.dims, [&](int tap, Eigen::Index vin, Eigen::Index vout) {
      g(vin, tap * cout + co) = d[vout];
    });
  }
  dw.noalias() += x.data.transpose() * g;
  db += dy.colwise().sum().transpose();
  FeatureMap<Scalar> dx(x.dims, x.channels());
  dx.data.noalias() = g * w.transpose();
  return dx;
}

/// Trilinear x2 upsampling per channel (voxel-centre aligned, clamped).
template <typename Scalar>
FeatureMap<Scalar> upsample2(const FeatureMap<Scalar>& x) {
  std::array<MatrixX<Scalar>, 3> ops;
  for (int a = 0; a < 3; ++a) ops[a] = upsample_operator<Scalar>(x.dims[a], 2 * x.dims[a], 2);
  FeatureMap<Scalar> y({2 * x.dims[0], 2 * x.dims[1], 2 * x.dims[2]}, x.channels());
  for (Eigen::Index c = 0; c < x.channels(); ++c) {
    auto r = apply_separable<Scalar>(std::span<const Scalar>(x.data.col(c).data(), x.voxels()), x.dims,
                                     {&ops[0], &ops[1], &ops[2]});
    y.data.col(c) = Eigen::Map<VectorX<Scalar>>(r.data(), y.voxels());
  }
  return y;
}

template <typename Scalar>
FeatureMap<Scalar> upsample2_backward(const std::array<int, 3>& in_dims, const MatrixX<Scalar>& dy) {
  std::array<MatrixX<Scalar>, 3> ops;
  for (int a = 0; a < 3; ++a) ops[a] = upsample_operator<Scalar>(in_dims[a], 2 * in_dims[a], 2);
  const std::array<int, 3> od{2 * in_dims[0], 2 * in_dims[1], 2 * in_dims[2]};
  FeatureMap<Scalar> dx(in_dims, dy.cols());
  for (Eigen::Index c = 0; c < dy.cols(); ++c) {
    auto r = apply_separable_adjoint<Scalar>(std::span<const Scalar>(dy.col(c).data(), dy.rows()), od,
                                             {&ops[0], &ops[1], &ops[2]});
    dx.data.col(c) = Eigen::Map<VectorX<Scalar>>(r.data(), dx.voxels());
  }
  return dx;
}

/// Trilinear additive upsampling: channels are summed in adjacent pairs
/// (halving the channel count) and upsampled x2.
template <typename Scalar>
FeatureMap<Scalar> additive_upsample(const FeatureMap<Scalar>& x) {
  if (x.channels() % 2 != 0) throw ShapeError("additive_upsample: channel count must be even");
  const Eigen::Index half = x.channels() / 2;
  FeatureMap<Scalar> paired(x.dims, half);
  for (Eigen::Index c = 0; c < half; ++c) paired.data.col(c) = x.data.col(2 * c) + x.data.col(2 * c + 1);
  return upsample2(paired);
}

template <typename Scalar>
FeatureMap<Scalar> additive_upsample_backward(const std::array<int, 3>& in_dims, const MatrixX<Scalar>& dy) {
  const FeatureMap<Scalar> dp = upsample2_backward(in_dims, dy);
  FeatureMap<Scalar> dx(in_dims, 2 * dy.cols());
  for (Eigen::Index c = 0; c < dy.cols(); ++c) {
    dx.data.col(2 * c) = dp.data.col(c);
    dx.data.col(2 * c + 1) = dp.data.col(c);
  }
  return dx;
}

}  // namespace layers
}  // namespace weakreg

#endif  // WEAKREG_LAYERS_HPP_

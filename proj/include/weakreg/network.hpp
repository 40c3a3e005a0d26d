#ifndef WEAKREG_NETWORK_HPP_
#define WEAKREG_NETWORK_HPP_

#include "weakreg/grid.hpp"
#include "weakreg/layers.hpp"
#include "weakreg/spatial.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace weakreg {

enum class HeadKind { ddf, affine };

/// Architecture: four down-sampling blocks, a bottleneck convolution, four
/// up-sampling blocks and one displacement summand head per selected level.
/// Channel count at level k is n0 * 2^k.
///
/// Down block: conv(k0)+BN+relu -> h0; conv+BN+relu; conv+BN; add h0; relu
/// (the block output, also the skip feature); maxpool.
/// Up block: deconv(x) + additive trilinear upsampling(x); add the skip
/// feature of the same level (r1); conv+BN+relu; conv+BN; add r1; relu.
/// Summand head: 3x3x3 conv + bias, no normalisation or activation.
struct NetworkConfig {
  static constexpr int kLevels = 4;

  int n0 = 32;
  std::set<int> summand_levels{0, 1, 2, 3, 4};
  HeadKind head = HeadKind::ddf;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.9;

  int channels(int level) const { return n0 << level; }

  void validate() const {
    if (n0 < 1) throw std::invalid_argument("n0 must be >= 1");
    if (head == HeadKind::ddf) {
      if (summand_levels.empty()) throw std::invalid_argument("summand_levels must be nonempty");
      for (int l : summand_levels)
        if (l < 0 || l > kLevels) throw std::invalid_argument("summand level outside [0, 4]");
    }
    if (!(bn_epsilon > 0) || !(bn_momentum >= 0 && bn_momentum < 1))
      throw std::invalid_argument("invalid batch-norm settings");
  }
};

enum class ParamRole {
  conv_weight,
  deconv_weight,
  deconv_bias,
  bn_gamma,
  bn_beta,
  bn_running_mean,
  bn_running_var,
  head_weight,
  head_bias,
  fc_weight,
  fc_bias,
};

inline bool is_trainable(ParamRole r) {
  return r != ParamRole::bn_running_mean && r != ParamRole::bn_running_var;
}

template <typename Scalar>
struct Parameter {
  std::string name;
  ParamRole role = ParamRole::conv_weight;
  int fan_in = 0;
  int fan_out = 0;
  MatrixX<Scalar> value;
  MatrixX<Scalar> grad;
  MatrixX<Scalar> adam_m;
  MatrixX<Scalar> adam_v;

  bool trainable() const { return is_trainable(role); }
  bool is_head() const { return role == ParamRole::head_weight || role == ParamRole::head_bias; }
};

/// Named parameter tensors with gradient and Adam moment buffers. Running
/// batch-norm statistics live here too (non-trainable).
template <typename Scalar>
class ParameterStore {
 public:
  std::vector<Parameter<Scalar>> params;

  int add(std::string name, Eigen::Index rows, Eigen::Index cols, ParamRole role, int fan_in = 0,
          int fan_out = 0) {
    Parameter<Scalar> p;
    p.name = std::move(name);
    p.role = role;
    p.fan_in = fan_in;
    p.fan_out = fan_out;
    p.value = MatrixX<Scalar>::Zero(rows, cols);
    p.grad = MatrixX<Scalar>::Zero(rows, cols);
    p.adam_m = MatrixX<Scalar>::Zero(rows, cols);
    p.adam_v = MatrixX<Scalar>::Zero(rows, cols);
    params.push_back(std::move(p));
    return static_cast<int>(params.size()) - 1;
  }

  int index(const std::string& name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return static_cast<int>(i);
    throw std::out_of_range("no parameter named " + name);
  }

  Parameter<Scalar>& operator[](int i) { return params[static_cast<std::size_t>(i)]; }
  const Parameter<Scalar>& operator[](int i) const { return params[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return params.size(); }

  std::size_t trainable_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params)
      if (p.trainable()) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params) p.grad.setZero();
  }

  template <typename To>
  ParameterStore<To> cast() const {
    ParameterStore<To> out;
    for (const auto& p : params) {
      Parameter<To> q;
      q.name = p.name;
      q.role = p.role;
      q.fan_in = p.fan_in;
      q.fan_out = p.fan_out;
      q.value = p.value.template cast<To>();
      q.grad = p.grad.template cast<To>();
      q.adam_m = p.adam_m.template cast<To>();
      q.adam_v = p.adam_v.template cast<To>();
      out.params.push_back(std::move(q));
    }
    return out;
  }
};

/// Per-parameter gradient buffers aligned with a ParameterStore.
template <typename Scalar>
using Gradients = std::vector<MatrixX<Scalar>>;

template <typename Scalar>
Gradients<Scalar> zero_gradients(const ParameterStore<Scalar>& store) {
  Gradients<Scalar> g;
  g.reserve(store.size());
  for (const auto& p : store.params) g.push_back(MatrixX<Scalar>::Zero(p.value.rows(), p.value.cols()));
  return g;
}

namespace detail {

struct ConvBnSlots {
  int weight = -1, gamma = -1, beta = -1, mean = -1, var = -1;
  int kernel = 3;
};

struct DownSlots {
  ConvBnSlots c0, c1, c2;
};

struct UpSlots {
  int deconv_w = -1, deconv_b = -1;
  ConvBnSlots c0, c1;
};

struct HeadSlots {
  int weight = -1, bias = -1;
};

template <typename Scalar>
ConvBnSlots declare_conv_bn(ParameterStore<Scalar>& s, const std::string& name, int cin, int cout, int k) {
  ConvBnSlots c;
  c.kernel = k;
  const int taps = k * k * k;
  c.weight = s.add(name + ".weight", taps * cin, cout, ParamRole::conv_weight, taps * cin, taps * cout);
  c.gamma = s.add(name + ".bn.gamma", cout, 1, ParamRole::bn_gamma);
  c.beta = s.add(name + ".bn.beta", cout, 1, ParamRole::bn_beta);
  c.mean = s.add(name + ".bn.running_mean", cout, 1, ParamRole::bn_running_mean);
  c.var = s.add(name + ".bn.running_var", cout, 1, ParamRole::bn_running_var);
  return c;
}

}  // namespace detail

/// Parameter layout shared by init_parameters and RegNet.
struct NetworkLayout {
  std::array<detail::DownSlots, NetworkConfig::kLevels> down{};
  detail::ConvBnSlots bottleneck{};
  std::array<detail::UpSlots, NetworkConfig::kLevels> up{};
  std::array<detail::HeadSlots, NetworkConfig::kLevels + 1> heads{};
  int fc_weight = -1, fc_bias = -1;
  std::size_t count = 0;
};

/// Declares every parameter of `cfg` into `store` (values zeroed) and
/// returns the slot layout.
template <typename Scalar>
NetworkLayout declare_network(const NetworkConfig& cfg, ParameterStore<Scalar>& store) {
  cfg.validate();
  NetworkLayout L;
  const std::string prefix = cfg.head == HeadKind::affine ? "global." : "";
  for (int k = 0; k < NetworkConfig::kLevels; ++k) {
    const int cin = k == 0 ? 2 : cfg.channels(k - 1), c = cfg.channels(k);
    const std::string b = prefix + "down" + std::to_string(k);
    L.down[k].c0 = detail::declare_conv_bn(store, b + ".conv0", cin, c, k == 0 ? 7 : 3);
    L.down[k].c1 = detail::declare_conv_bn(store, b + ".conv1", c, c, 3);
    L.down[k].c2 = detail::declare_conv_bn(store, b + ".conv2", c, c, 3);
  }
  if (cfg.head == HeadKind::affine) {
    const int c3 = cfg.channels(3);
    L.fc_weight = store.add("global.fc.weight", c3, 12, ParamRole::fc_weight, c3, 12);
    L.fc_bias = store.add("global.fc.bias", 12, 1, ParamRole::fc_bias);
    L.count = store.size();
    return L;
  }
  L.bottleneck = detail::declare_conv_bn(store, "bottleneck.conv", cfg.channels(3), cfg.channels(4), 3);
  for (int k = NetworkConfig::kLevels - 1; k >= 0; --k) {
    const int cin = cfg.channels(k + 1), c = cfg.channels(k);
    const std::string b = "up" + std::to_string(k);
    constexpr int taps = layers::kDeconvKernel * layers::kDeconvKernel * layers::kDeconvKernel;
    L.up[k].deconv_w = store.add(b + ".deconv.weight", cin, taps * c, ParamRole::deconv_weight, taps * cin, taps * c);
    L.up[k].deconv_b = store.add(b + ".deconv.bias", c, 1, ParamRole::deconv_bias);
    L.up[k].c0 = detail::declare_conv_bn(store, b + ".conv0", c, c, 3);
    L.up[k].c1 = detail::declare_conv_bn(store, b + ".conv1", c, c, 3);
  }
  for (int k = 0; k <= NetworkConfig::kLevels; ++k) {
    const int c = cfg.channels(k);
    const std::string b = "head" + std::to_string(k);
    L.heads[k].weight = store.add(b + ".weight", 27 * c, 3, ParamRole::head_weight, 27 * c, 27 * 3);
    L.heads[k].bias = store.add(b + ".bias", 3, 1, ParamRole::head_bias);
  }
  L.count = store.size();
  return L;
}

/// Xavier-uniform weights, zero biases, unit BN scale, zero summand heads,
/// identity affine head. Deterministic per seed (values drawn in double).
template <typename Scalar = float>
ParameterStore<Scalar> init_parameters(const NetworkConfig& cfg, std::uint64_t seed) {
  ParameterStore<Scalar> store;
  declare_network(cfg, store);
  std::mt19937_64 rng(seed);
  for (auto& p : store.params) {
    switch (p.role) {
      case ParamRole::conv_weight:
      case ParamRole::deconv_weight: {
        const double bound = std::sqrt(6.0 / (p.fan_in + p.fan_out));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<Scalar>(u(rng));
        break;
      }
      case ParamRole::bn_gamma:
      case ParamRole::bn_running_var:
        p.value.setOnes();
        break;
      case ParamRole::fc_bias: {
        const auto id = AffineParams::identity().to_array();
        for (int i = 0; i < 12; ++i) p.value(i, 0) = static_cast<Scalar>(id[static_cast<std::size_t>(i)]);
        break;
      }
      default:
        p.value.setZero();
    }
  }
  return store;
}

template <typename Scalar>
struct ConvBnCache {
  FeatureMap<Scalar> input;
  layers::BatchNormCache<Scalar> bn;
  FeatureMap<Scalar> output;
};

template <typename Scalar>
struct DownCache {
  ConvBnCache<Scalar> c0, c1, c2;
  FeatureMap<Scalar> output;  // relu(c2 + h0), also the skip feature
  std::vector<std::int32_t> argmax;
  FeatureMap<Scalar> pooled;
};

template <typename Scalar>
struct UpCache {
  FeatureMap<Scalar> input;
  FeatureMap<Scalar> r1;
  ConvBnCache<Scalar> c0, c1;
  FeatureMap<Scalar> output;
};

/// Activations retained by a forward pass for the matching backward pass.
template <typename Scalar>
struct ForwardState {
  bool training = true;
  GridMeta meta;
  std::array<DownCache<Scalar>, NetworkConfig::kLevels> down;
  ConvBnCache<Scalar> bottleneck;
  std::array<UpCache<Scalar>, NetworkConfig::kLevels> up;
  int lowest_up = NetworkConfig::kLevels;
  std::map<int, VectorGrid<Scalar>> summands;
  VectorGrid<Scalar> ddf;

  // Affine head.
  VectorX<Scalar> pooled_features;
  std::array<double, 12> affine_raw{};

  /// Batch statistics observed in training mode: (parameter index, value).
  std::vector<std::pair<int, VectorX<Scalar>>> batch_stats;
};

/// The registration network. Stateless apart from its configuration and
/// parameter layout; parameters are passed explicitly so several forward
/// passes can share one store.
template <typename Scalar>
class RegNet {
 public:
  explicit RegNet(NetworkConfig cfg) : cfg_(std::move(cfg)) {
    ParameterStore<Scalar> scratch;
    layout_ = declare_network(cfg_, scratch);
    for (const auto& p : scratch.params) {
      names_.push_back(p.name);
      shapes_.emplace_back(p.value.rows(), p.value.cols());
    }
  }

  const NetworkConfig& config() const { return cfg_; }
  const NetworkLayout& layout() const { return layout_; }

  void check_store(const ParameterStore<Scalar>& s) const {
    if (s.size() != names_.size()) throw ShapeError("parameter store does not match network config");
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (s.params[i].name != names_[i] || s.params[i].value.rows() != shapes_[i].first ||
          s.params[i].value.cols() != shapes_[i].second)
        throw ShapeError("parameter store layout mismatch at " + names_[i]);
  }

  static void check_input(const GridMeta& moving, const GridMeta& fixed) {
    if (moving != fixed) throw ShapeError("moving and fixed images must share grid meta");
    for (int a = 0; a < 3; ++a)
      if (fixed.dims[a] % 16 != 0) throw ShapeError("spatial dims must be divisible by 16");
  }

  /// Displacement prediction: summands per configured level and their
  /// aggregate on the input grid.
  template <typename ImageScalar>
  ForwardState<Scalar> forward(const BasicVolume<ImageScalar>& moving, const BasicVolume<ImageScalar>& fixed,
                               const ParameterStore<Scalar>& store, bool training) const {
    if (cfg_.head != HeadKind::ddf) throw std::logic_error("forward() needs a ddf-head network");
    check_store(store);
    check_input(moving.meta, fixed.meta);
    ForwardState<Scalar> st;
    st.training = training;
    st.meta = fixed.meta;

    FeatureMap<Scalar> x = input_features(moving, fixed);
    for (int k = 0; k < NetworkConfig::kLevels; ++k) {
      down_forward(layout_.down[k], x, store, st, st.down[k]);
      x = st.down[k].pooled;
    }
    const FeatureMap<Scalar> b = conv_bn_forward(layout_.bottleneck, x, store, st, st.bottleneck, true);

    const int lowest = *cfg_.summand_levels.begin();
    st.lowest_up = lowest;
    FeatureMap<Scalar> cur = b;
    for (int k = NetworkConfig::kLevels - 1; k >= lowest; --k) {
      up_forward(layout_.up[k], cur, st.down[k].output, store, st, st.up[k]);
      cur = st.up[k].output;
    }
    for (int level : cfg_.summand_levels) {
      const FeatureMap<Scalar>& feat = level == NetworkConfig::kLevels ? b : st.up[level].output;
      const auto& h = layout_.heads[level];
      const VectorX<Scalar> bias = store[h.bias].value.col(0);
      FeatureMap<Scalar> d = layers::conv3d(feat, store[h.weight].value, 3, &bias);
      std::vector<Scalar> data(d.data.data(), d.data.data() + d.data.size());
      st.summands.emplace(level, VectorGrid<Scalar>(level_meta(fixed.meta, level), std::move(data)));
    }
    st.ddf = aggregate_summands(st.summands, fixed.meta);
    return st;
  }

  /// Reverse pass from d(loss)/d(ddf); accumulates into `grads`.
  void backward(const ForwardState<Scalar>& st, const VectorGrid<Scalar>& d_ddf, const ParameterStore<Scalar>& store,
                Gradients<Scalar>& grads) const {
    const std::array<int, 3> full = st.meta.dims;
    std::array<MatrixX<Scalar>, NetworkConfig::kLevels + 1> d_feat;
    for (int level : cfg_.summand_levels) {
      const GridMeta lm = level_meta(st.meta, level);
      const Eigen::Index V = static_cast<Eigen::Index>(lm.voxel_count());
      MatrixX<Scalar> dd(V, 3);
      if (level == 0) {
        dd = Eigen::Map<const MatrixX<Scalar>>(d_ddf.data.data(), V, 3);
      } else {
        std::array<MatrixX<Scalar>, 3> ops;
        for (int a = 0; a < 3; ++a) ops[a] = upsample_operator<Scalar>(lm.dims[a], full[a], 1 << level);
        for (int c = 0; c < 3; ++c) {
          auto r = apply_separable_adjoint<Scalar>(
              std::span<const Scalar>(d_ddf.component(c), d_ddf.voxels()), full, {&ops[0], &ops[1], &ops[2]});
          dd.col(c) = Eigen::Map<VectorX<Scalar>>(r.data(), V);
        }
      }
      const auto& h = layout_.heads[level];
      const FeatureMap<Scalar>& feat = level == NetworkConfig::kLevels ? st.bottleneck.output : st.up[level].output;
      VectorX<Scalar> db = VectorX<Scalar>::Zero(3);
      FeatureMap<Scalar> df = layers::conv3d_backward(feat, store[h.weight].value, 3, dd, grads[h.weight], &db);
      grads[h.bias].col(0) += db;
      d_feat[level] = std::move(df.data);
    }

    // Up path, from the finest computed level back to the bottleneck.
    std::array<MatrixX<Scalar>, NetworkConfig::kLevels> d_skip;
    MatrixX<Scalar> d_cur;
    for (int k = st.lowest_up; k < NetworkConfig::kLevels; ++k) {
      MatrixX<Scalar> d_out = d_feat[k].size() ? d_feat[k] : MatrixX<Scalar>::Zero(st.up[k].output.voxels(),
                                                                                   st.up[k].output.channels());
      if (d_cur.size()) d_out += d_cur;
      d_cur = up_backward(layout_.up[k], st.up[k], d_out, store, grads, d_skip[k]);
    }
    MatrixX<Scalar> d_b = d_feat[NetworkConfig::kLevels].size()
                              ? d_feat[NetworkConfig::kLevels]
                              : MatrixX<Scalar>::Zero(st.bottleneck.output.voxels(), st.bottleneck.output.channels());
    if (d_cur.size()) d_b += d_cur;
    MatrixX<Scalar> d_x = conv_bn_backward(layout_.bottleneck, st.bottleneck, d_b, store, grads, true, true);
    down_chain_backward(st, d_x, d_skip, store, grads);
  }

  /// Affine-head prediction: trunk, global average pooling, fully-connected
  /// layer to 12 parameters. The displacement field is affine_to_ddf of it.
  template <typename ImageScalar>
  ForwardState<Scalar> forward_affine(const BasicVolume<ImageScalar>& moving, const BasicVolume<ImageScalar>& fixed,
                                      const ParameterStore<Scalar>& store, bool training) const {
    if (cfg_.head != HeadKind::affine) throw std::logic_error("forward_affine() needs an affine-head network");
    check_store(store);
    check_input(moving.meta, fixed.meta);
    ForwardState<Scalar> st;
    st.training = training;
    st.meta = fixed.meta;
    FeatureMap<Scalar> x = input_features(moving, fixed);
    for (int k = 0; k < NetworkConfig::kLevels; ++k) {
      down_forward(layout_.down[k], x, store, st, st.down[k]);
      x = st.down[k].pooled;
    }
    st.pooled_features = x.data.colwise().mean().transpose();
    const VectorX<Scalar> out =
        store[layout_.fc_bias].value.col(0) + store[layout_.fc_weight].value.transpose() * st.pooled_features;
    for (int i = 0; i < 12; ++i) st.affine_raw[static_cast<std::size_t>(i)] = static_cast<double>(out[i]);
    st.ddf = affine_to_ddf<Scalar>(AffineParams::from_array(st.affine_raw), fixed.meta);
    return st;
  }

  /// Reverse pass of forward_affine from d(loss)/d(12 params).
  void backward_affine(const ForwardState<Scalar>& st, const std::array<double, 12>& d_params,
                       const ParameterStore<Scalar>& store, Gradients<Scalar>& grads) const {
    VectorX<Scalar> d_out(12);
    for (int i = 0; i < 12; ++i) d_out[i] = static_cast<Scalar>(d_params[static_cast<std::size_t>(i)]);
    grads[layout_.fc_weight] += st.pooled_features * d_out.transpose();
    grads[layout_.fc_bias].col(0) += d_out;
    const VectorX<Scalar> d_g = store[layout_.fc_weight].value * d_out;
    const auto& last = st.down[NetworkConfig::kLevels - 1].pooled;
    MatrixX<Scalar> d_x = (VectorX<Scalar>::Ones(last.voxels()) * d_g.transpose()) / Scalar(last.voxels());
    std::array<MatrixX<Scalar>, NetworkConfig::kLevels> no_skip;
    down_chain_backward(st, d_x, no_skip, store, grads);
  }

  /// Folds the batch statistics observed in training-mode forward passes
  /// into the running statistics: running = m * running + (1 - m) * batch.
  void update_running_stats(const ForwardState<Scalar>& st, ParameterStore<Scalar>& store) const {
    const Scalar m = static_cast<Scalar>(cfg_.bn_momentum);
    for (const auto& [idx, v] : st.batch_stats) store[idx].value.col(0) = m * store[idx].value.col(0) + (1 - m) * v;
  }

 private:
  template <typename ImageScalar>
  static FeatureMap<Scalar> input_features(const BasicVolume<ImageScalar>& moving,
                                           const BasicVolume<ImageScalar>& fixed) {
    FeatureMap<Scalar> x(fixed.meta.dims, 2);
    x.data.col(0) = moving.vec().template cast<Scalar>();
    x.data.col(1) = fixed.vec().template cast<Scalar>();
    return x;
  }

  FeatureMap<Scalar> conv_bn_forward(const detail::ConvBnSlots& s, const FeatureMap<Scalar>& x,
                                     const ParameterStore<Scalar>& store, ForwardState<Scalar>& st,
                                     ConvBnCache<Scalar>& cache, bool with_relu) const {
    cache.input = x;
    FeatureMap<Scalar> y = layers::conv3d(x, store[s.weight].value, s.kernel);
    y = layers::batchnorm<Scalar>(y, store[s.gamma].value.col(0), store[s.beta].value.col(0),
                                  store[s.mean].value.col(0), store[s.var].value.col(0), cfg_.bn_epsilon,
                                  st.training, &cache.bn);
    if (st.training) {
      st.batch_stats.emplace_back(s.mean, cache.bn.batch_mean);
      st.batch_stats.emplace_back(s.var, cache.bn.batch_var);
    }
    if (with_relu) y = layers::relu(std::move(y));
    cache.output = y;
    return y;
  }

  /// d_out is the gradient of the cached output (post-relu when with_relu).
  MatrixX<Scalar> conv_bn_backward(const detail::ConvBnSlots& s, const ConvBnCache<Scalar>& cache,
                                   const MatrixX<Scalar>& d_out, const ParameterStore<Scalar>& store,
                                   Gradients<Scalar>& grads, bool with_relu, bool need_input_grad) const {
    const MatrixX<Scalar> d_bn = with_relu ? layers::relu_backward(cache.output, d_out) : d_out;
    VectorX<Scalar> dg = VectorX<Scalar>::Zero(d_bn.cols()), dbeta = VectorX<Scalar>::Zero(d_bn.cols());
    const MatrixX<Scalar> d_conv = layers::batchnorm_backward(cache.bn, VectorX<Scalar>(store[s.gamma].value.col(0)),
                                                              d_bn, dg, dbeta);
    grads[s.gamma].col(0) += dg;
    grads[s.beta].col(0) += dbeta;
    auto dx = layers::conv3d_backward(cache.input, store[s.weight].value, s.kernel, d_conv, grads[s.weight],
                                      nullptr, need_input_grad);
    return std::move(dx.data);
  }

  void down_forward(const detail::DownSlots& s, const FeatureMap<Scalar>& x, const ParameterStore<Scalar>& store,
                    ForwardState<Scalar>& st, DownCache<Scalar>& c) const {
    const FeatureMap<Scalar> h0 = conv_bn_forward(s.c0, x, store, st, c.c0, true);
    const FeatureMap<Scalar> r1 = conv_bn_forward(s.c1, h0, store, st, c.c1, true);
    FeatureMap<Scalar> t = conv_bn_forward(s.c2, r1, store, st, c.c2, false);
    t.data += h0.data;
    c.output = layers::relu(std::move(t));
    c.pooled = layers::maxpool2(c.output, &c.argmax);
  }

  /// Returns the gradient of the block input. `d_skip` may be empty.
  MatrixX<Scalar> down_backward(const detail::DownSlots& s, const DownCache<Scalar>& c, const MatrixX<Scalar>& d_pooled,
                                const MatrixX<Scalar>& d_skip, const ParameterStore<Scalar>& store,
                                Gradients<Scalar>& grads, bool need_input_grad) const {
    FeatureMap<Scalar> d_r2 = layers::maxpool2_backward(c.output.dims, c.argmax, d_pooled);
    if (d_skip.size()) d_r2.data += d_skip;
    const MatrixX<Scalar> d_sum = layers::relu_backward(c.output, d_r2.data);
    MatrixX<Scalar> d_h0 = d_sum;
    const MatrixX<Scalar> d_r1 = conv_bn_backward(s.c2, c.c2, d_sum, store, grads, false, true);
    d_h0 += conv_bn_backward(s.c1, c.c1, d_r1, store, grads, true, true);
    return conv_bn_backward(s.c0, c.c0, d_h0, store, grads, true, need_input_grad);
  }

  void down_chain_backward(const ForwardState<Scalar>& st, MatrixX<Scalar> d_x,
                           const std::array<MatrixX<Scalar>, NetworkConfig::kLevels>& d_skip,
                           const ParameterStore<Scalar>& store, Gradients<Scalar>& grads) const {
    for (int k = NetworkConfig::kLevels - 1; k >= 0; --k)
      d_x = down_backward(layout_.down[k], st.down[k], d_x, d_skip[k], store, grads, k > 0);
  }

  void up_forward(const detail::UpSlots& s, const FeatureMap<Scalar>& x, const FeatureMap<Scalar>& skip,
                  const ParameterStore<Scalar>& store, ForwardState<Scalar>& st, UpCache<Scalar>& c) const {
    c.input = x;
    FeatureMap<Scalar> h0 = layers::deconv2<Scalar>(x, store[s.deconv_w].value, store[s.deconv_b].value.col(0));
    h0.data += layers::additive_upsample(x).data;
    h0.data += skip.data;
    c.r1 = h0;
    const FeatureMap<Scalar> a = conv_bn_forward(s.c0, c.r1, store, st, c.c0, true);
    FeatureMap<Scalar> t = conv_bn_forward(s.c1, a, store, st, c.c1, false);
    t.data += c.r1.data;
    c.output = layers::relu(std::move(t));
  }

  MatrixX<Scalar> up_backward(const detail::UpSlots& s, const UpCache<Scalar>& c, const MatrixX<Scalar>& d_out,
                              const ParameterStore<Scalar>& store, Gradients<Scalar>& grads,
                              MatrixX<Scalar>& d_skip) const {
    const MatrixX<Scalar> d_sum = layers::relu_backward(c.output, d_out);
    MatrixX<Scalar> d_r1 = d_sum;
    const MatrixX<Scalar> d_a = conv_bn_backward(s.c1, c.c1, d_sum, store, grads, false, true);
    d_r1 += conv_bn_backward(s.c0, c.c0, d_a, store, grads, true, true);
    d_skip = d_r1;
    VectorX<Scalar> db = VectorX<Scalar>::Zero(d_r1.cols());
    FeatureMap<Scalar> dx = layers::deconv2_backward(c.input, store[s.deconv_w].value, d_r1, grads[s.deconv_w], db);
    grads[s.deconv_b].col(0) += db;
    dx.data += layers::additive_upsample_backward(c.input.dims, d_r1).data;
    return std::move(dx.data);
  }

  NetworkConfig cfg_;
  NetworkLayout layout_;
  std::vector<std::string> names_;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes_;
};

}  // namespace weakreg

#endif  // WEAKREG_NETWORK_HPP_

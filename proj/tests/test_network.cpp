#include "doctest.h"
#include "test_util.hpp"

#include "weakreg/network.hpp"

using namespace weakreg;

namespace {

template <typename S>
BasicVolume<S> random_volume(const GridMeta& m, std::mt19937_64& rng) {
  return BasicVolume<S>(m, test::random_values<S>(m.voxel_count(), rng, -1, 1));
}

void randomize_heads(ParameterStore<double>& s, std::mt19937_64& rng, double scale = 0.1) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& p : s.params)
    if (p.is_head() || p.role == ParamRole::fc_weight)
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = u(rng);
}

/// Picks n (parameter, entry) pairs uniformly over trainable scalars.
std::vector<std::pair<int, Eigen::Index>> pick_entries(const ParameterStore<double>& s, int n, std::mt19937_64& rng) {
  std::vector<std::pair<int, Eigen::Index>> all;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s.params[i].trainable())
      for (Eigen::Index e = 0; e < s.params[i].value.size(); ++e) all.emplace_back(int(i), e);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::size_t(n));
  return all;
}

}  // namespace

TEST_CASE("init_parameters") {
  NetworkConfig cfg;
  cfg.n0 = 4;
  const auto s = init_parameters<float>(cfg, 17);
  SUBCASE("summand heads are exactly zero") {
    int heads = 0;
    for (const auto& p : s.params)
      if (p.is_head()) {
        ++heads;
        CHECK(p.value.cwiseAbs().maxCoeff() == 0.0f);
      }
    CHECK(heads == 10);
  }
  SUBCASE("weights lie inside the Xavier bound and are not degenerate") {
    for (const auto& p : s.params) {
      if (p.role != ParamRole::conv_weight && p.role != ParamRole::deconv_weight) continue;
      const double bound = std::sqrt(6.0 / (p.fan_in + p.fan_out));
      CHECK(p.value.cwiseAbs().maxCoeff() <= bound);
      CHECK(p.value.cwiseAbs().maxCoeff() > 0.5 * bound);
    }
  }
  SUBCASE("fan values follow the kernel geometry") {
    const auto& first = s[s.index("down0.conv0.weight")];
    CHECK(first.value.rows() == 343 * 2);
    CHECK(first.value.cols() == 4);
    CHECK(first.fan_in == 343 * 2);
    CHECK(first.fan_out == 343 * 4);
    CHECK(s[s.index("down2.conv1.weight")].value.rows() == 27 * 16);
    CHECK(s[s.index("bottleneck.conv.weight")].value.cols() == 64);
    CHECK(s[s.index("up3.deconv.weight")].value.rows() == 64);
    CHECK(s[s.index("up3.deconv.weight")].value.cols() == 64 * 32);
  }
  SUBCASE("batch-norm defaults") {
    for (const auto& p : s.params) {
      if (p.role == ParamRole::bn_gamma || p.role == ParamRole::bn_running_var) CHECK(p.value.minCoeff() == 1.0f);
      if (p.role == ParamRole::bn_beta || p.role == ParamRole::bn_running_mean) CHECK(p.value.cwiseAbs().maxCoeff() == 0.0f);
    }
  }
  SUBCASE("same seed is bitwise identical, different seed differs") {
    const auto t = init_parameters<float>(cfg, 17), u = init_parameters<float>(cfg, 18);
    bool differs = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      CHECK(s.params[i].value == t.params[i].value);
      differs |= s.params[i].value != u.params[i].value;
    }
    CHECK(differs);
  }
  SUBCASE("affine head starts at the identity") {
    NetworkConfig a = cfg;
    a.head = HeadKind::affine;
    const auto g = init_parameters<float>(a, 1);
    CHECK(g[g.index("global.fc.weight")].value.cwiseAbs().maxCoeff() == 0.0f);
    const auto& b = g[g.index("global.fc.bias")].value;
    CHECK(b.rows() == 12);
    const auto id = AffineParams::identity().to_array();
    for (int i = 0; i < 12; ++i) CHECK(b(i, 0) == float(id[std::size_t(i)]));
  }
  SUBCASE("invalid configs are rejected") {
    NetworkConfig bad = cfg;
    bad.summand_levels = {};
    CHECK_THROWS(init_parameters<float>(bad, 1));
    bad.summand_levels = {5};
    CHECK_THROWS(init_parameters<float>(bad, 1));
    bad = cfg;
    bad.n0 = 0;
    CHECK_THROWS(init_parameters<float>(bad, 1));
  }
}

TEST_CASE("forward") {
  std::mt19937_64 rng(2);
  NetworkConfig cfg;
  cfg.n0 = 4;
  const GridMeta m({32, 32, 32}, 0.8);
  const auto mov = random_volume<float>(m, rng), fix = random_volume<float>(m, rng);
  const RegNet<float> net(cfg);
  auto store = init_parameters<float>(cfg, 3);

  SUBCASE("shapes propagate and the initial field is exactly zero") {
    const auto st = net.forward(mov, fix, store, true);
    for (int k = 0; k < 4; ++k) {
      CHECK(st.down[k].output.dims == std::array<int, 3>{32 >> k, 32 >> k, 32 >> k});
      CHECK(st.down[k].output.channels() == 4 << k);
      CHECK(st.up[k].output.dims == st.down[k].output.dims);
      CHECK(st.up[k].output.channels() == 4 << k);
    }
    CHECK(st.bottleneck.output.dims == std::array<int, 3>{2, 2, 2});
    CHECK(st.bottleneck.output.channels() == 64);
    CHECK(st.summands.size() == 5);
    for (const auto& [level, d] : st.summands) CHECK(d.meta == level_meta(m, level));
    CHECK(st.ddf.meta == m);
    CHECK(st.ddf.data.size() == 3 * 32 * 32 * 32);
    for (float x : st.ddf.data) CHECK(x == 0.0f);
  }
  SUBCASE("forward is deterministic") {
    auto& hw = store[store.index("head0.weight")].value;
    hw.setConstant(0.01f);
    const auto a = net.forward(mov, fix, store, true), b = net.forward(mov, fix, store, true);
    CHECK(a.ddf.data == b.ddf.data);
    CHECK(a.ddf.vec().cwiseAbs().maxCoeff() > 0.0f);
  }
  SUBCASE("variants compute only what they need and keep full-resolution output") {
    NetworkConfig d0 = cfg;
    d0.summand_levels = {0};
    const auto s0 = net.forward(mov, fix, store, true);
    const RegNet<float> n0(d0);
    const auto st0 = n0.forward(mov, fix, init_parameters<float>(d0, 3), true);
    CHECK(st0.summands.size() == 1);
    CHECK(st0.summands.count(0) == 1);
    CHECK(st0.ddf.meta == m);

    NetworkConfig d14 = cfg;
    d14.summand_levels = {1, 2, 3, 4};
    const RegNet<float> n14(d14);
    const auto st14 = n14.forward(mov, fix, init_parameters<float>(d14, 3), true);
    CHECK(st14.lowest_up == 1);
    CHECK(st14.summands.size() == 4);
    CHECK(st14.summands.count(0) == 0);
    CHECK(st14.ddf.meta == m);
    CHECK(s0.lowest_up == 0);
  }
  SUBCASE("training mode records batch statistics, inference mode uses running ones") {
    const auto tr = net.forward(mov, fix, store, true);
    CHECK(tr.batch_stats.size() == 2 * (4 * 3 + 1 + 4 * 2));
    const auto inf = net.forward(mov, fix, store, false);
    CHECK(inf.batch_stats.empty());
    auto updated = store;
    net.update_running_stats(tr, updated);
    const auto& [idx, batch_mean] = tr.batch_stats.front();
    const VectorX<float> expected = 0.9f * store[idx].value.col(0) + 0.1f * batch_mean;
    CHECK((updated[idx].value.col(0) - expected).cwiseAbs().maxCoeff() < 1e-6f);
  }
  SUBCASE("shape violations") {
    const GridMeta bad({24, 32, 32}, 0.8);
    CHECK_THROWS_AS(net.forward(random_volume<float>(bad, rng), random_volume<float>(bad, rng), store, true),
                    ShapeError);
    CHECK_THROWS_AS(net.forward(mov, random_volume<float>(GridMeta({32, 32, 32}, 1.0), rng), store, true),
                    ShapeError);
    NetworkConfig other = cfg;
    other.n0 = 2;
    CHECK_THROWS_AS(net.forward(mov, fix, init_parameters<float>(other, 1), true), ShapeError);
  }
}

TEST_CASE("backward matches finite differences (64-bit, n0 = 2, 16^3)") {
  std::mt19937_64 rng(4);
  const GridMeta m({16, 16, 16}, 0.8);
  const auto mov = random_volume<double>(m, rng), fix = random_volume<double>(m, rng);

  SUBCASE("ddf head, all variants") {
    for (std::set<int> levels : {std::set<int>{0, 1, 2, 3, 4}, std::set<int>{0}, std::set<int>{1, 2, 3, 4}}) {
      NetworkConfig cfg;
      cfg.n0 = 2;
      cfg.summand_levels = levels;
      const RegNet<double> net(cfg);
      auto store = init_parameters<double>(cfg, 5);
      randomize_heads(store, rng);
      const auto G = test::random_values<double>(3 * m.voxel_count(), rng, -1, 1);
      auto objective = [&] {
        const auto st = net.forward(mov, fix, store, true);
        double s = 0;
        for (std::size_t i = 0; i < G.size(); ++i) s += G[i] * st.ddf.data[i];
        return s;
      };
      const auto st = net.forward(mov, fix, store, true);
      auto grads = zero_gradients(store);
      net.backward(st, VectorGrid<double>(m, G), store, grads);
      double worst = 0;
      for (const auto& [pi, e] : pick_entries(store, 20, rng)) {
        double& x = store[pi].value.data()[e];
        const double saved = x, h = 1e-6;
        x = saved + h;
        const double fp = objective();
        x = saved - h;
        const double fm = objective();
        x = saved;
        worst = std::max(worst, test::rel_err((fp - fm) / (2 * h), grads[std::size_t(pi)].data()[e], 1e-7));
      }
      CHECK(worst < 1e-3);
    }
  }

  SUBCASE("affine head") {
    NetworkConfig cfg;
    cfg.n0 = 2;
    cfg.head = HeadKind::affine;
    const RegNet<double> net(cfg);
    auto store = init_parameters<double>(cfg, 6);
    randomize_heads(store, rng, 0.5);
    std::array<double, 12> G{};
    for (auto& g : G) g = std::uniform_real_distribution<double>(-1, 1)(rng);
    auto objective = [&] {
      const auto st = net.forward_affine(mov, fix, store, true);
      double s = 0;
      for (int i = 0; i < 12; ++i) s += G[std::size_t(i)] * st.affine_raw[std::size_t(i)];
      return s;
    };
    const auto st = net.forward_affine(mov, fix, store, true);
    auto grads = zero_gradients(store);
    net.backward_affine(st, G, store, grads);
    double worst = 0;
    for (const auto& [pi, e] : pick_entries(store, 20, rng)) {
      double& x = store[pi].value.data()[e];
      const double saved = x, h = 1e-6;
      x = saved + h;
      const double fp = objective();
      x = saved - h;
      const double fm = objective();
      x = saved;
      worst = std::max(worst, test::rel_err((fp - fm) / (2 * h), grads[std::size_t(pi)].data()[e], 1e-7));
    }
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("affine head") {
  std::mt19937_64 rng(7);
  NetworkConfig cfg;
  cfg.n0 = 2;
  cfg.head = HeadKind::affine;
  const GridMeta m({16, 16, 16}, 0.8);
  const RegNet<double> net(cfg);
  auto store = init_parameters<double>(cfg, 8);
  const auto mov = random_volume<double>(m, rng), fix = random_volume<double>(m, rng);

  SUBCASE("fresh parameters give the identity and a zero field") {
    const auto st = net.forward_affine(mov, fix, store, true);
    CHECK(st.affine_raw == AffineParams::identity().to_array());
    for (double x : st.ddf.data) CHECK(x == 0.0);
  }
  SUBCASE("output depends on features only through their spatial mean") {
    randomize_heads(store, rng, 0.5);
    const auto st = net.forward_affine(mov, fix, store, true);
    const auto& last = st.down[3].pooled;
    CHECK((st.pooled_features - VectorX<double>(last.data.colwise().mean().transpose())).norm() < 1e-12);
    // Reversing the voxel order of the pooled map changes nothing downstream.
    const MatrixX<double> permuted = last.data.colwise().reverse();
    const VectorX<double> pooled = permuted.colwise().mean().transpose();
    const VectorX<double> out = store[store.index("global.fc.bias")].value.col(0) +
                                store[store.index("global.fc.weight")].value.transpose() * pooled;
    for (int i = 0; i < 12; ++i) CHECK(out[i] == doctest::Approx(st.affine_raw[std::size_t(i)]).epsilon(1e-12));
  }
  SUBCASE("wrong entry point") {
    CHECK_THROWS(net.forward(mov, fix, store, true));
  }
}

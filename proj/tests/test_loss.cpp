#include "doctest.h"
#include "test_util.hpp"

#include "weakreg/loss.hpp"

using namespace weakreg;

namespace {

/// Brute-force 3D convolution with a product kernel built from an
/// independently sampled Gaussian, clamped borders.
std::vector<double> dense_gaussian(const std::vector<double>& f, const GridMeta& m, double sigma_mm) {
  if (sigma_mm == 0) return f;
  std::array<std::vector<double>, 3> k;
  for (int a = 0; a < 3; ++a) {
    const double s = sigma_mm / m.spacing[a];
    const int r = int(std::ceil(3 * s));
    double sum = 0;
    for (int t = -r; t <= r; ++t) {
      k[a].push_back(std::exp(-t * t / (2 * s * s)));
      sum += k[a].back();
    }
    for (auto& x : k[a]) x /= sum;
  }
  const int rx = int(k[0].size() / 2), ry = int(k[1].size() / 2), rz = int(k[2].size() / 2);
  const auto& d = m.dims;
  std::vector<double> out(f.size(), 0.0);
  for (int z = 0; z < d[2]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[0]; ++x) {
        double acc = 0;
        for (int c = -rz; c <= rz; ++c)
          for (int b = -ry; b <= ry; ++b)
            for (int a = -rx; a <= rx; ++a) {
              const int xi = std::clamp(x + a, 0, d[0] - 1), yi = std::clamp(y + b, 0, d[1] - 1),
                        zi = std::clamp(z + c, 0, d[2] - 1);
              acc += k[0][a + rx] * k[1][b + ry] * k[2][c + rz] * f[m.index(xi, yi, zi)];
            }
        out[m.index(x, y, z)] = acc;
      }
  return out;
}

double dice_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    s += a[i] + b[i];
  }
  return 2 * ab / s;
}

double ce_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double bc = std::min(std::max(b[i], 1e-6), 1 - 1e-6);
    acc += a[i] * std::log(bc) + (1 - a[i]) * std::log(1 - bc);
  }
  return acc;
}

template <typename F>
double worst_fd(std::vector<double>& x, const std::vector<double>& analytic, F f) {
  double worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    worst = std::max(worst, test::rel_err(test::central_difference(x, i, f), analytic[i], 1e-6));
  return worst;
}

}  // namespace

TEST_CASE("soft_dice") {
  std::mt19937_64 rng(1);
  SUBCASE("identical binary masks") {
    std::vector<double> a(27, 0.0);
    for (std::size_t i = 0; i < a.size(); i += 3) a[i] = 1.0;
    CHECK(soft_dice<double>(a, a) == 1.0);
  }
  SUBCASE("identical soft masks score sum(a^2)/sum(a)") {
    const auto a = test::random_values<double>(27, rng);
    double sq = 0, s = 0;
    for (double x : a) {
      sq += x * x;
      s += x;
    }
    CHECK(soft_dice<double>(a, a) == doctest::Approx(sq / s).epsilon(1e-12));
  }
  SUBCASE("half overlap") {
    const std::vector<double> a{1, 1, 0, 0}, b{0, 1, 1, 0};
    CHECK(soft_dice<double>(a, b) == doctest::Approx(0.5));
  }
  SUBCASE("random masks match direct sums, gradients match finite differences") {
    auto a = test::random_values<double>(64, rng), b = test::random_values<double>(64, rng);
    CHECK(std::abs(soft_dice<double>(a, b) - dice_oracle(a, b)) < 1e-6);
    const auto g = soft_dice_with_gradient<double>(a, b);
    CHECK(std::abs(g.value - dice_oracle(a, b)) < 1e-6);
    CHECK(worst_fd(a, g.d_a, [&] { return soft_dice<double>(a, b); }) < 1e-4);
    CHECK(worst_fd(b, g.d_b, [&] { return soft_dice<double>(a, b); }) < 1e-4);
  }
  SUBCASE("both empty scores one with zero gradient") {
    const std::vector<double> z(8, 0.0);
    const auto g = soft_dice_with_gradient<double>(z, z);
    CHECK(g.value == 1.0);
    for (double x : g.d_a) CHECK(x == 0.0);
    for (double x : g.d_b) CHECK(x == 0.0);
  }
  SUBCASE("size mismatch") {
    const std::vector<double> a(3), b(4);
    CHECK_THROWS_AS(soft_dice<double>(a, b), GridError);
  }
}

TEST_CASE("gaussian_filter") {
  std::mt19937_64 rng(2);
  SUBCASE("kernels are normalised") {
    for (double s : {0.0, 0.3, 1.25, 2.5, 10.0, 40.0}) CHECK(std::abs(gaussian_kernel(s).sum() - 1.0) < 1e-7);
    CHECK(gaussian_kernel(0.0).size() == 1);
    CHECK(gaussian_kernel(2.5).size() == 2 * 8 + 1);
  }
  SUBCASE("sigma zero is the exact identity") {
    GridMeta m({5, 4, 3}, 0.8);
    BasicLabelMask<double> l(m, test::random_values<double>(m.voxel_count(), rng));
    CHECK(gaussian_filter(l, 0.0).data == l.data);
  }
  SUBCASE("unit impulse matches dense convolution") {
    GridMeta m({8, 8, 8}, 0.8);
    BasicLabelMask<double> l(m);
    l(4, 4, 4) = 1.0;
    const auto out = gaussian_filter(l, 2.0);
    const auto ref = dense_gaussian(l.data, m, 2.0);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(out.data[i] - ref[i]) < 1e-6);
  }
  SUBCASE("random inputs up to 8^3 match dense convolution at every default scale") {
    for (auto dims : {std::array<int, 3>{8, 8, 8}, std::array<int, 3>{5, 7, 3}, std::array<int, 3>{1, 6, 2}}) {
      GridMeta m(dims, Eigen::Vector3d(0.8, 0.7, 1.1));
      BasicLabelMask<double> l(m, test::random_values<double>(m.voxel_count(), rng));
      for (double s : MultiscaleConfig{}.sigmas) {
        if (s > 8) continue;
        const auto out = gaussian_filter(l, s);
        const auto ref = dense_gaussian(l.data, m, s);
        double worst = 0;
        for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(out.data[i] - ref[i]));
        CHECK(worst < 1e-6);
      }
    }
  }
  SUBCASE("wide kernels match dense convolution on a small grid") {
    GridMeta m({4, 3, 5}, 0.8);
    BasicLabelMask<double> l(m, test::random_values<double>(m.voxel_count(), rng));
    for (double s : {16.0, 32.0}) {
      const auto out = gaussian_filter(l, s);
      const auto ref = dense_gaussian(l.data, m, s);
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(out.data[i] - ref[i]) < 1e-6);
    }
  }
  SUBCASE("constant input stays constant") {
    GridMeta m({6, 5, 7}, 0.8);
    BasicLabelMask<double> l(m, 0.7);
    for (double s : MultiscaleConfig{}.sigmas)
      for (double x : gaussian_filter(l, s).data) CHECK(std::abs(x - 0.7) < 1e-12);
  }
  SUBCASE("mass is preserved with zero borders") {
    GridMeta m({24, 24, 24}, 0.8);
    BasicLabelMask<double> l(m);
    for (int k = 10; k < 14; ++k)
      for (int j = 10; j < 14; ++j)
        for (int i = 10; i < 14; ++i) l(i, j, k) = std::uniform_real_distribution<double>(0, 1)(rng);
    const double mass = l.vec().sum();
    for (double s : {1.0, 2.0}) {  // kernel radius stays inside the 10-voxel zero margin
      const auto out = gaussian_filter(l, s);
      CHECK(std::abs(out.vec().sum() - mass) < 1e-5 * mass);
    }
  }
  SUBCASE("output stays in [0,1]") {
    GridMeta m({7, 6, 5}, 0.8);
    BasicLabelMask<float> l(m, test::random_values<float>(m.voxel_count(), rng));
    for (double s : MultiscaleConfig{}.sigmas)
      for (float x : gaussian_filter(l, s).data) {
        CHECK(x >= 0.0f);
        CHECK(x <= 1.0f + 1e-6f);
      }
  }
  SUBCASE("adjoint satisfies the inner-product identity") {
    GridMeta m({6, 5, 4}, Eigen::Vector3d(0.8, 0.8, 1.0));
    MultiscaleFilter<double> f(MultiscaleConfig{}, m);
    const auto x = test::random_values<double>(m.voxel_count(), rng, -1, 1);
    const auto y = test::random_values<double>(m.voxel_count(), rng, -1, 1);
    for (int s = 0; s < f.scales(); ++s) {
      const auto fx = f.apply(s, x), fty = f.adjoint(s, y);
      double lhs = 0, rhs = 0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        lhs += fx[i] * y[i];
        rhs += x[i] * fty[i];
      }
      CHECK(std::abs(lhs - rhs) < 1e-10);
    }
  }
}

TEST_CASE("multiscale_dice") {
  std::mt19937_64 rng(3);
  SUBCASE("default config has seven scales") {
    const MultiscaleConfig c;
    CHECK(c.sigmas == std::vector<double>{0, 1, 2, 4, 8, 16, 32});
  }
  SUBCASE("identical binary masks: exact at sigma 0, literal soft Dice of the blurred mask elsewhere") {
    GridMeta m({6, 6, 6}, 0.8);
    MultiscaleFilter<double> f(MultiscaleConfig{}, m);
    BasicLabelMask<double> l(m);
    for (int k = 1; k < 5; ++k)
      for (int j = 2; j < 5; ++j)
        for (int i = 1; i < 4; ++i) l(i, j, k) = 1.0;
    const auto r = multiscale_dice(l, l, f);
    CHECK(r.per_scale.front() == 1.0);
    double expected = 0;
    for (std::size_t s = 0; s < r.per_scale.size(); ++s) {
      const auto fl = dense_gaussian(l.data, m, MultiscaleConfig{}.sigmas[s]);
      const double d = dice_oracle(fl, fl);
      CHECK(r.per_scale[s] == doctest::Approx(d).epsilon(1e-9));
      CHECK(r.per_scale[s] <= 1.0);
      expected += d;
    }
    CHECK(r.value == doctest::Approx(expected / 7).epsilon(1e-9));
  }
  SUBCASE("disjoint voxels ten apart") {
    GridMeta m({16, 3, 3}, 0.8);
    MultiscaleFilter<double> f(MultiscaleConfig{}, m);
    BasicLabelMask<double> a(m), b(m);
    a(2, 1, 1) = 1.0;
    b(12, 1, 1) = 1.0;
    const auto r = multiscale_dice(a, b, f);
    CHECK(r.per_scale.front() == 0.0);
    CHECK(r.per_scale.back() > 0.0);
    CHECK(r.value > 0.0);
    CHECK(r.value < 1.0);
    double expected = 0;
    for (double s : MultiscaleConfig{}.sigmas) expected += dice_oracle(dense_gaussian(a.data, m, s), dense_gaussian(b.data, m, s));
    CHECK(std::abs(r.value - expected / 7) < 1e-6);
  }
  SUBCASE("range, symmetry, single-scale reduction") {
    GridMeta m({5, 6, 4}, 0.8);
    MultiscaleFilter<double> f(MultiscaleConfig{}, m), f0(MultiscaleConfig{{0.0}}, m);
    for (int t = 0; t < 5; ++t) {
      BasicLabelMask<double> a(m, test::random_values<double>(m.voxel_count(), rng)),
          b(m, test::random_values<double>(m.voxel_count(), rng));
      const double ab = multiscale_dice(a, b, f).value, ba = multiscale_dice(b, a, f).value;
      CHECK(ab >= 0.0);
      CHECK(ab <= 1.0);
      CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
      CHECK(multiscale_dice(a, b, f0).value == doctest::Approx(soft_dice(a, b)).epsilon(1e-12));
    }
  }
  SUBCASE("gradients match finite differences") {
    GridMeta m({5, 4, 6}, Eigen::Vector3d(0.8, 0.9, 0.7));
    MultiscaleFilter<double> f(MultiscaleConfig{}, m);
    auto a = test::random_values<double>(m.voxel_count(), rng);
    auto b = test::random_values<double>(m.voxel_count(), rng);
    const auto r = multiscale_dice<double>(a, b, f, true);
    auto val = [&] { return double(multiscale_dice<double>(a, b, f).value); };
    CHECK(worst_fd(b, r.d_warped, val) < 1e-4);
    CHECK(worst_fd(a, r.d_fixed, val) < 1e-4);
  }
}

TEST_CASE("multiscale_cross_entropy") {
  std::mt19937_64 rng(4);
  GridMeta m({4, 5, 3}, 0.8);
  const double n = double(m.voxel_count());
  MultiscaleFilter<double> f0(MultiscaleConfig{{0.0}}, m);
  SUBCASE("perfect binary match scores zero") {
    BasicLabelMask<double> a(m, 1.0);
    // Only the clip keeps it from exactly zero: n log(1 - 1e-6).
    CHECK(std::abs(multiscale_cross_entropy(a, a, f0).value) <= n * 1.0000006e-6);
  }
  SUBCASE("half-probability prediction") {
    BasicLabelMask<double> a(m, 1.0), b(m, 0.5);
    CHECK(multiscale_cross_entropy(a, b, f0).value == doctest::Approx(n * std::log(0.5)).epsilon(1e-12));
  }
  SUBCASE("clipping keeps extremes finite") {
    BasicLabelMask<double> a(m, 1.0), b(m, 0.0);
    const auto r = multiscale_cross_entropy(a, b, f0);
    CHECK(std::isfinite(r.value));
    CHECK(r.value == doctest::Approx(n * std::log(1e-6)).epsilon(1e-9));
    for (double g : r.d_warped) CHECK(g == 0.0);
  }
  SUBCASE("random masks match the dense oracle at every scale") {
    MultiscaleFilter<double> f(MultiscaleConfig{}, m);
    BasicLabelMask<double> a(m, test::random_values<double>(m.voxel_count(), rng)),
        b(m, test::random_values<double>(m.voxel_count(), rng, 0.05, 0.95));
    double expected = 0;
    for (double s : MultiscaleConfig{}.sigmas) expected += ce_oracle(dense_gaussian(a.data, m, s), dense_gaussian(b.data, m, s));
    CHECK(std::abs(multiscale_cross_entropy(a, b, f).value - expected / 7) < 1e-5);
  }
  SUBCASE("gradients match finite differences") {
    MultiscaleFilter<double> f(MultiscaleConfig{}, m);
    auto a = test::random_values<double>(m.voxel_count(), rng);
    auto b = test::random_values<double>(m.voxel_count(), rng, 0.05, 0.95);
    const auto r = multiscale_cross_entropy<double>(a, b, f, true);
    auto val = [&] { return double(multiscale_cross_entropy<double>(a, b, f).value); };
    CHECK(worst_fd(b, r.d_warped, val) < 1e-4);
    CHECK(worst_fd(a, r.d_fixed, val) < 1e-4);
  }
}

TEST_CASE("stacked_similarity") {
  std::mt19937_64 rng(5);
  GridMeta m({5, 5, 5}, 0.8);
  MultiscaleFilter<double> f(MultiscaleConfig{}, m);
  const auto a = test::random_values<double>(m.voxel_count(), rng);
  const auto b = test::random_values<double>(m.voxel_count(), rng);
  std::vector<std::vector<double>> fa, fb;
  for (int s = 0; s < f.scales(); ++s) {
    fa.push_back(f.apply(s, a));
    fb.push_back(f.apply(s, b));
  }
  for (auto kind : {SimilarityKind::dice, SimilarityKind::cross_entropy}) {
    const auto st = stacked_similarity(fa, fb, kind);
    const auto direct = kind == SimilarityKind::dice ? multiscale_dice<double>(a, b, f) : multiscale_cross_entropy<double>(a, b, f);
    CHECK(st.value == doctest::Approx(direct.value).epsilon(1e-12));
    CHECK(st.d_warped.size() == fa.size() * a.size());
  }
}

TEST_CASE("regularizers") {
  std::mt19937_64 rng(6);
  SUBCASE("affine field has zero bending energy") {
    GridMeta m({6, 5, 7}, Eigen::Vector3d(0.8, 1.0, 1.2));
    Eigen::Matrix3d A;
    A << 0.1, 0.2, -0.3, 0.05, -0.1, 0.2, 0.3, 0.1, 0.0;
    VectorGrid<double> u(m);
    for (int k = 0; k < 7; ++k)
      for (int j = 0; j < 5; ++j)
        for (int i = 0; i < 6; ++i) u.set(m.index(i, j, k), A * m.position(i, j, k) + Eigen::Vector3d(1, 2, 3));
    CHECK(std::abs(bending_energy(u).value) < 1e-20);
  }
  SUBCASE("quadratic field u_x = x^2 sums to 4 per interior voxel") {
    GridMeta m({5, 4, 4}, 1.0);
    VectorGrid<double> u(m);
    for (int k = 0; k < 4; ++k)
      for (int j = 0; j < 4; ++j)
        for (int i = 0; i < 5; ++i) u.component(0)[m.index(i, j, k)] = double(i * i);
    // Mean over the three components: (4 + 0 + 0) / 3.
    CHECK(bending_energy(u).value == doctest::Approx(4.0 / 3.0).epsilon(1e-12));
  }
  SUBCASE("constant field has zero gradient penalty") {
    GridMeta m({4, 4, 4}, 0.8);
    VectorGrid<double> u(m);
    for (std::size_t v = 0; v < u.voxels(); ++v) u.set(v, Eigen::Vector3d(1, -2, 0.5));
    CHECK(l2_gradient_penalty(u).value == 0.0);
  }
  SUBCASE("u = (0.1 x, 0, 0) gives 0.01") {
    GridMeta m({5, 5, 5}, 0.8);
    VectorGrid<double> u(m);
    for (int k = 0; k < 5; ++k)
      for (int j = 0; j < 5; ++j)
        for (int i = 0; i < 5; ++i) u.component(0)[m.index(i, j, k)] = 0.1 * i * 0.8;
    CHECK(l2_gradient_penalty(u).value == doctest::Approx(0.01).epsilon(1e-12));
  }
  SUBCASE("gradients match finite differences") {
    GridMeta m({5, 4, 6}, Eigen::Vector3d(0.8, 0.9, 1.1));
    VectorGrid<double> u(m, test::random_values<double>(3 * m.voxel_count(), rng, -1, 1));
    for (auto kind : {RegularizerKind::bending, RegularizerKind::l2_gradient}) {
      const auto r = regularizer(u, kind);
      CHECK(worst_fd(u.data, r.grad.data, [&] { return double(regularizer(u, kind).value); }) < 1e-4);
    }
  }
  SUBCASE("adding a constant field changes nothing") {
    GridMeta m({6, 5, 4}, Eigen::Vector3d(0.8, 0.8, 1.0));
    VectorGrid<double> u(m);
    std::uniform_int_distribution<int> d(-1024, 1024);
    for (auto& x : u.data) x = d(rng) / 1024.0;
    VectorGrid<double> shifted = u;
    for (std::size_t v = 0; v < u.voxels(); ++v) shifted.set(v, u.at(v) + Eigen::Vector3d(3.25, -1.5, 0.125));
    CHECK(bending_energy(shifted).value == bending_energy(u).value);
    CHECK(l2_gradient_penalty(shifted).value == l2_gradient_penalty(u).value);
  }
  SUBCASE("too-thin grid is rejected") {
    VectorGrid<double> u(GridMeta({2, 5, 5}, 0.8));
    CHECK_THROWS_AS(bending_energy(u), GridError);
  }
}

TEST_CASE("total_loss") {
  CHECK(total_loss(1.0, 0.0) == -1.0);
  CHECK(kBaselineAlpha == 0.5);
  CHECK(total_loss(0.8, 0.4, 0.5) == doctest::Approx(-0.6));
  CHECK_THROWS(total_loss(0.8, 0.4, -0.1));
}

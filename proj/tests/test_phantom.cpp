#include "doctest.h"
#include "test_util.hpp"

#include "weakreg/config.hpp"
#include "weakreg/intensity.hpp"
#include "weakreg/phantom.hpp"
#include "weakreg/volume_io.hpp"

#include <set>

using namespace weakreg;

namespace {

PhantomSpec small_spec() {
  PhantomSpec s;
  s.meta = GridMeta({16, 16, 16}, 1.6);
  s.supersampling = 2;
  s.seed = 5;
  return s;
}

bool same(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0;
}

}  // namespace

TEST_CASE("phantom with zero deformation") {
  PhantomSpec s = small_spec();
  s.max_rotation_deg = s.max_log_scale = s.max_translation_mm = s.sinusoid_amplitude_mm = 0;
  const auto c = synth_case(s, 0);
  CHECK(c.ground_truth.vec().cwiseAbs().maxCoeff() == 0.0f);
  for (const auto& l : c.labels) {
    CHECK(same(l.moving.data, l.fixed.data));
    CHECK((centroid(l.moving) - centroid(l.fixed)).norm() == 0.0);
  }
  // Same anatomy, different renderings.
  CHECK_FALSE(same(c.moving.data, c.fixed.data));
}

TEST_CASE("phantom cases") {
  const PhantomSpec s = small_spec();
  const auto corpus = synth_corpus(s, 20, 3);
  REQUIRE(corpus.train.size() == 20);
  REQUIRE(corpus.heldout.size() == 3);

  SUBCASE("ground truth folds nowhere and is smooth") {
    for (const auto& c : corpus.train) {
      const auto J = jacobian_determinant_map(c.ground_truth);
      CHECK(*std::min_element(J.data.begin(), J.data.end()) > 0.0f);
      CHECK(regularizer(c.ground_truth, RegularizerKind::bending).value <= s.max_bending_energy);
      CHECK(c.ground_truth.vec().cwiseAbs().maxCoeff() > 0.0f);
    }
  }
  SUBCASE("label counts vary") {
    std::set<std::size_t> m;
    for (const auto& c : corpus.train) {
      CHECK(c.labels.size() >= std::size_t(1 + s.landmarks_min));
      CHECK(c.labels.size() <= std::size_t(1 + s.landmarks_max));
      m.insert(c.labels.size());
    }
    CHECK(m.size() >= 3);
  }
  SUBCASE("landmarks lie inside the gland") {
    for (const auto& c : corpus.train) {
      const auto& gland = c.labels[0].fixed;
      for (std::size_t l = 1; l < c.labels.size(); ++l) {
        double inside = 0, total = 0;
        for (std::size_t v = 0; v < gland.size(); ++v) {
          total += c.labels[l].fixed.data[v];
          inside += std::min(c.labels[l].fixed.data[v], gland.data[v]);
        }
        CHECK(total > 0);
        CHECK(inside >= 0.99 * total);
      }
    }
  }
  SUBCASE("images are normalised and labels are fractions") {
    for (const auto& c : corpus.heldout) {
      for (const Volume* v : {&c.moving, &c.fixed}) {
        const Eigen::VectorXd x = v->vec().cast<double>();
        CHECK(std::abs(x.mean()) < 1e-5);
        CHECK(std::abs(std::sqrt((x.array() - x.mean()).square().mean()) - 1) < 1e-4);
      }
      for (const auto& l : c.labels)
        for (const LabelMask* m : {&l.moving, &l.fixed}) {
          CHECK(m->vec().minCoeff() >= 0.0f);
          CHECK(m->vec().maxCoeff() <= 1.0f);
        }
    }
  }
  SUBCASE("ground truth aligns landmark centroids to sub-voxel accuracy") {
    for (const auto& c : corpus.train)
      for (const auto& l : c.labels) {
        const double d = (centroid(warp(l.moving, c.ground_truth)) - centroid(l.fixed)).norm();
        CHECK(d < 0.5 * s.meta.spacing.maxCoeff());
      }
  }
  SUBCASE("cases are reproducible per index and differ across indices") {
    const auto again = synth_case(s, 4);
    CHECK(same(again.moving.data, corpus.train[4].moving.data));
    CHECK(same(again.ground_truth.data, corpus.train[4].ground_truth.data));
    CHECK_FALSE(same(corpus.train[3].fixed.data, corpus.train[4].fixed.data));
    CHECK(corpus.heldout[0].index == 20);
    CHECK(corpus.heldout[0].id == "case_020");
  }
}

TEST_CASE("phantom rejects an unattainable smoothness bound") {
  PhantomSpec s = small_spec();
  s.max_bending_energy = 1e-30;
  CHECK_THROWS_AS(synth_case(s, 0), PhantomError);
  s = small_spec();
  s.sinusoid_amplitude_mm = 3.0;
  s.max_bending_energy = 1e9;
  const auto free = synth_case(s, 1);
  REQUIRE(free.magnitude == 1.0);
  const double be = regularizer(free.ground_truth, RegularizerKind::bending).value;
  s.max_bending_energy = 0.5 * be;
  const auto c = synth_case(s, 1);
  CHECK(c.magnitude < 1.0);
  CHECK(regularizer(c.ground_truth, RegularizerKind::bending).value <= 0.5 * be);
}

TEST_CASE("phantom spec JSON") {
  PhantomSpec s = small_spec();
  s.landmarks_max = 4;
  s.moving.gamma = 0.7;
  const nlohmann::json j = s;
  const auto back = j.get<PhantomSpec>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.meta == s.meta);
  nlohmann::json bad = j;
  bad["colour"] = 1;
  CHECK_THROWS_AS(bad.get<PhantomSpec>(), ConfigError);
  bad = j;
  bad["landmarks_min"] = 9;
  CHECK_THROWS_AS(bad.get<PhantomSpec>(), ConfigError);
  bad = j;
  bad["spacing"] = 0.5;
  CHECK(bad.get<PhantomSpec>().meta.spacing == Eigen::Vector3d::Constant(0.5));
}

TEST_CASE("corpus manifest round trip") {
  const auto dir = test::scratch_dir("phantom_manifest");
  const auto corpus = synth_corpus(small_spec(), 3, 2);
  const auto manifest = write_corpus(corpus, dir);
  const auto train = read_corpus(manifest, Split::train);
  const auto held = read_corpus(manifest, Split::heldout);
  const auto all = read_corpus(manifest, Split::all);
  REQUIRE(train.size() == 3);
  REQUIRE(held.size() == 2);
  CHECK(all.size() == 5);
  std::set<int> ti, hi;
  for (const auto& c : train) ti.insert(c.index);
  for (const auto& c : held) hi.insert(c.index);
  for (int i : hi) CHECK(ti.count(i) == 0);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(train[i].id == corpus.train[i].id);
    CHECK(same(train[i].moving.data, corpus.train[i].moving.data));
    CHECK(same(train[i].ground_truth.data, corpus.train[i].ground_truth.data));
    REQUIRE(train[i].labels.size() == corpus.train[i].labels.size());
    for (std::size_t l = 0; l < train[i].labels.size(); ++l)
      CHECK(same(train[i].labels[l].fixed.data, corpus.train[i].labels[l].fixed.data));
  }
  CHECK(to_training_corpus(train).label_counts().size() == 3);
  CHECK_THROWS_AS(parse_split("test"), ConfigError);
}

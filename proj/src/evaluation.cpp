#include "weakreg/evaluation.hpp"

#include "weakreg/config.hpp"
#include "weakreg/intensity.hpp"
#include "weakreg/spatial.hpp"
#include "weakreg/volume_io.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace weakreg {

using nlohmann::json;

TreResult tre(const std::vector<LabelMask>& warped, const std::vector<LabelMask>& fixed) {
  if (warped.size() != fixed.size()) throw std::invalid_argument("tre: label list lengths differ");
  TreResult r;
  double ss = 0;
  for (std::size_t l = 0; l < warped.size(); ++l) {
    Eigen::Vector3d a, b;
    try {
      a = centroid(warped[l]);
      b = centroid(fixed[l]);
    } catch (const EmptyLabelError&) {
      r.excluded.push_back(static_cast<int>(l));
      continue;
    }
    const double d = (a - b).norm();
    r.distances.push_back(d);
    ss += d * d;
  }
  r.tre = r.distances.empty() ? std::nan("") : std::sqrt(ss / static_cast<double>(r.distances.size()));
  return r;
}

std::optional<double> dsc(const LabelMask& warped, const LabelMask& fixed) {
  if (warped.meta != fixed.meta) throw GridError("dsc: label grids differ");
  long a = 0, b = 0, both = 0;
  for (std::size_t v = 0; v < warped.size(); ++v) {
    const bool x = warped.data[v] >= 0.5f, y = fixed.data[v] >= 0.5f;
    a += x;
    b += y;
    both += x && y;
  }
  if (a + b == 0) return std::nullopt;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  if (!(p >= 0 && p <= 100)) throw std::invalid_argument("percentile must be in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double f = pos - static_cast<double>(lo);
  return values[lo] + f * (values[hi] - values[lo]);
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.n = static_cast<int>(values.size());
  if (values.empty()) {
    s.median = s.p10 = s.p25 = s.p75 = s.p90 = std::nan("");
    return s;
  }
  s.p10 = percentile(values, 10);
  s.p25 = percentile(values, 25);
  s.median = percentile(values, 50);
  s.p75 = percentile(values, 75);
  s.p90 = percentile(values, 90);
  return s;
}

namespace {

std::vector<LabelMask> landmarks(const std::vector<LabelMask>& all) { return {all.begin() + 1, all.end()}; }

void warn(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

}  // namespace

EvalReport evaluate(const std::vector<PhantomCase>& cases, const DdfPredictor& predict,
                    const std::filesystem::path& maps_dir) {
  EvalReport rep;
  std::vector<double> tres, dscs, itres, idscs;
  for (const auto& c : cases) {
    if (c.labels.empty()) throw std::invalid_argument("case " + c.id + " has no labels");
    const DisplacementField u = predict(c);
    if (u.meta != c.fixed.meta) throw GridError("case " + c.id + ": predicted DDF grid differs from the fixed image");
    CaseReport cr;
    cr.id = c.id;
    cr.index = c.index;
    std::vector<LabelMask> warped, moving, fixed;
    for (const auto& l : c.labels) {
      warped.push_back(warp(l.moving, u));
      moving.push_back(l.moving);
      fixed.push_back(l.fixed);
    }
    const TreResult t = tre(landmarks(warped), landmarks(fixed));
    const TreResult t0 = tre(landmarks(moving), landmarks(fixed));
    cr.distances = t.distances;
    for (int e : t.excluded) cr.excluded_landmarks.push_back(e + 1);
    if (!t.excluded.empty()) warn(c.id + ": " + std::to_string(t.excluded.size()) + " empty landmark(s) excluded");
    if (t.valid()) {
      cr.tre = t.tre;
      tres.push_back(t.tre);
    } else {
      warn(c.id + ": no evaluable landmarks");
    }
    if (t0.valid()) {
      cr.initial_tre = t0.tre;
      itres.push_back(t0.tre);
    }
    cr.dsc = dsc(warped[0], fixed[0]);
    cr.initial_dsc = dsc(moving[0], fixed[0]);
    if (cr.dsc) dscs.push_back(*cr.dsc);
    else warn(c.id + ": empty glands excluded from DSC");
    if (cr.initial_dsc) idscs.push_back(*cr.initial_dsc);

    const Volume J = jacobian_determinant_map(u);
    const Eigen::VectorXd j = J.vec().cast<double>();
    cr.negative_jacobian_voxels = (j.array() < 0).count();
    cr.jacobian_min = j.minCoeff();
    cr.jacobian_std = std::sqrt((j.array() - j.mean()).square().mean());
    rep.negative_jacobian_voxels += cr.negative_jacobian_voxels;

    if (!maps_dir.empty()) {
      const auto d = maps_dir / c.id;
      write_volume(warp(c.moving, u), d / "warped_moving");
      write_volume(u, d / "ddf");
      write_volume(J, d / "jacobian");
      write_volume(displacement_magnitude_map(u), d / "magnitude");
      write_volume(gradient_l2norm_map(u), d / "gradient_norm");
    }
    rep.cases.push_back(std::move(cr));
  }
  rep.tre = summarize(tres);
  rep.dsc = summarize(dscs);
  rep.initial_tre = summarize(itres);
  rep.initial_dsc = summarize(idscs);
  rep.metadata = {{"tre_labels", "landmarks only; label 0 (gland) is used for DSC"},
                  {"dsc_threshold", 0.5},
                  {"percentile_method", "linear interpolation at p/100*(n-1)"}};
  return rep;
}

namespace {

json summary_json(const Summary& s) {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return {{"n", s.n},          {"median", num(s.median)}, {"p10", num(s.p10)},
          {"p25", num(s.p25)}, {"p75", num(s.p75)},       {"p90", num(s.p90)}};
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

json to_json(const EvalReport& r) {
  json cases = json::array();
  for (const auto& c : r.cases)
    cases.push_back({{"id", c.id},
                     {"index", c.index},
                     {"distances_mm", c.distances},
                     {"excluded_labels", c.excluded_landmarks},
                     {"tre_mm", opt_json(c.tre)},
                     {"initial_tre_mm", opt_json(c.initial_tre)},
                     {"dsc", opt_json(c.dsc)},
                     {"initial_dsc", opt_json(c.initial_dsc)},
                     {"negative_jacobian_voxels", c.negative_jacobian_voxels},
                     {"jacobian_min", c.jacobian_min},
                     {"jacobian_std", c.jacobian_std}});
  return {{"cases", cases},
          {"tre_mm", summary_json(r.tre)},
          {"dsc", summary_json(r.dsc)},
          {"initial_tre_mm", summary_json(r.initial_tre)},
          {"initial_dsc", summary_json(r.initial_dsc)},
          {"negative_jacobian_voxels", r.negative_jacobian_voxels},
          {"metadata", r.metadata}};
}

void write_percentile_csv(const EvalReport& r, std::ostream& out) {
  out << "metric,n,p10,p25,median,p75,p90\n";
  const std::pair<const char*, const Summary*> rows[] = {
      {"tre_mm", &r.tre}, {"dsc", &r.dsc}, {"initial_tre_mm", &r.initial_tre}, {"initial_dsc", &r.initial_dsc}};
  out.precision(10);
  for (const auto& [name, s] : rows)
    out << name << ',' << s->n << ',' << s->p10 << ',' << s->p25 << ',' << s->median << ',' << s->p75 << ','
        << s->p90 << '\n';
}

NormStats parse_norm_stats(const std::string& s) {
  if (s == "per_pair") return NormStats::per_pair;
  if (s == "running") return NormStats::running;
  throw ConfigError("unknown batch-norm statistics '" + s + "' (per_pair, running)");
}

std::string to_string(NormStats s) { return s == NormStats::per_pair ? "per_pair" : "running"; }

Registrator::Registrator(Checkpoint ckpt, NormStats stats) : stats_(stats) {
  if (ckpt.network.head == HeadKind::affine) global_ = std::move(ckpt);
  else local_ = std::move(ckpt);
}

Registrator::Registrator(Checkpoint global, Checkpoint local, NormStats stats) : stats_(stats) {
  if (global.network.head != HeadKind::affine) throw std::invalid_argument("composite: first checkpoint must have an affine head");
  if (local.network.head != HeadKind::ddf) throw std::invalid_argument("composite: second checkpoint must have a ddf head");
  global_ = std::move(global);
  local_ = std::move(local);
}

void Registrator::check_grid(const GridMeta& m) const { RegNet<float>::check_input(m, m); }

DisplacementField Registrator::run(const Checkpoint& c, const Volume& moving, const Volume& fixed) const {
  const RegNet<float> net(c.network);
  const bool batch = stats_ == NormStats::per_pair;
  if (c.network.head == HeadKind::affine) return net.forward_affine(moving, fixed, c.store, batch).ddf;
  return net.forward(moving, fixed, c.store, batch).ddf;
}

DisplacementField Registrator::operator()(const Volume& moving, const Volume& fixed) const {
  check_grid(fixed.meta);
  if (moving.meta != fixed.meta) throw GridError("register: moving and fixed grids differ");
  if (global_ && local_) {
    const DisplacementField a = run(*global_, moving, fixed);
    const DisplacementField l = run(*local_, warp(moving, a), fixed);
    return compose(a, l);
  }
  return run(global_ ? *global_ : *local_, moving, fixed);
}

}  // namespace weakreg

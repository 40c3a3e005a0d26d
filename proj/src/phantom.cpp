#include "weakreg/phantom.hpp"

#include "weakreg/config.hpp"
#include "weakreg/intensity.hpp"
#include "weakreg/loss.hpp"
#include "weakreg/spatial.hpp"
#include "weakreg/volume_io.hpp"

#include <cmath>
#include <algorithm>
#include <cstdio>
#include <numbers>
#include <optional>
#include <random>

namespace weakreg {

using nlohmann::json;

void PhantomSpec::validate() const {
  meta.validate();
  for (int a = 0; a < 3; ++a)
    if (!(gland_axes_min[a] > 0) || gland_axes_max[a] < gland_axes_min[a])
      throw PhantomError("gland axes must satisfy 0 < min <= max");
  if (landmarks_min < 1 || landmarks_max < landmarks_min) throw PhantomError("landmark counts must satisfy 1 <= min <= max");
  if (!(landmark_radius_min_mm > 0) || landmark_radius_max_mm < landmark_radius_min_mm)
    throw PhantomError("landmark radii must satisfy 0 < min <= max");
  if (landmark_radius_max_mm >= gland_axes_min.minCoeff()) throw PhantomError("landmarks do not fit inside the gland");
  for (double v : {gland_jitter_mm, max_rotation_deg, max_log_scale, max_translation_mm, sinusoid_amplitude_mm})
    if (!(v >= 0) || !std::isfinite(v)) throw PhantomError("deformation and jitter magnitudes must be finite and >= 0");
  if (!(wavelength_frac > 0)) throw PhantomError("wavelength_frac must be > 0");
  if (!(max_bending_energy > 0)) throw PhantomError("max_bending_energy must be > 0");
  if (supersampling < 1) throw PhantomError("supersampling must be >= 1");
  for (const auto* r : {&moving, &fixed})
    if (!(r->gamma > 0) || r->speckle < 0 || r->noise < 0) throw PhantomError("invalid modality rendering");
}

namespace {

json vec_json(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }

Eigen::Vector3d json_vec(const json& j) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json rendering_json(const ModalityRendering& r) {
  return json{{"background", r.background}, {"gland", r.gland}, {"landmark", r.landmark},
              {"gamma", r.gamma},           {"speckle", r.speckle}, {"noise", r.noise}};
}

ModalityRendering json_rendering(const json& j) {
  ModalityRendering r;
  for (const auto& [k, v] : j.items()) {
    if (k == "background") r.background = v.get<double>();
    else if (k == "gland") r.gland = v.get<double>();
    else if (k == "landmark") r.landmark = v.get<double>();
    else if (k == "gamma") r.gamma = v.get<double>();
    else if (k == "speckle") r.speckle = v.get<double>();
    else if (k == "noise") r.noise = v.get<double>();
    else throw ConfigError("unknown key '" + k + "' in modality rendering");
  }
  return r;
}

}  // namespace

void to_json(json& j, const PhantomSpec& s) {
  j = json{{"dims", s.meta.dims},
           {"spacing", vec_json(s.meta.spacing)},
           {"gland_axes_min", vec_json(s.gland_axes_min)},
           {"gland_axes_max", vec_json(s.gland_axes_max)},
           {"gland_jitter_mm", s.gland_jitter_mm},
           {"landmarks_min", s.landmarks_min},
           {"landmarks_max", s.landmarks_max},
           {"landmark_radius_min_mm", s.landmark_radius_min_mm},
           {"landmark_radius_max_mm", s.landmark_radius_max_mm},
           {"max_rotation_deg", s.max_rotation_deg},
           {"max_log_scale", s.max_log_scale},
           {"max_translation_mm", s.max_translation_mm},
           {"sinusoid_amplitude_mm", s.sinusoid_amplitude_mm},
           {"wavelength_frac", s.wavelength_frac},
           {"max_bending_energy", s.max_bending_energy},
           {"supersampling", s.supersampling},
           {"moving", rendering_json(s.moving)},
           {"fixed", rendering_json(s.fixed)},
           {"seed", s.seed}};
}

void from_json(const json& j, PhantomSpec& s) {
  if (!j.is_object()) throw ConfigError("phantom spec must be a JSON object");
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "dims") s.meta.dims = v.get<std::array<int, 3>>();
      else if (k == "spacing") s.meta.spacing = v.is_number() ? Eigen::Vector3d::Constant(v.get<double>()) : json_vec(v);
      else if (k == "gland_axes_min") s.gland_axes_min = json_vec(v);
      else if (k == "gland_axes_max") s.gland_axes_max = json_vec(v);
      else if (k == "gland_jitter_mm") s.gland_jitter_mm = v.get<double>();
      else if (k == "landmarks_min") s.landmarks_min = v.get<int>();
      else if (k == "landmarks_max") s.landmarks_max = v.get<int>();
      else if (k == "landmark_radius_min_mm") s.landmark_radius_min_mm = v.get<double>();
      else if (k == "landmark_radius_max_mm") s.landmark_radius_max_mm = v.get<double>();
      else if (k == "max_rotation_deg") s.max_rotation_deg = v.get<double>();
      else if (k == "max_log_scale") s.max_log_scale = v.get<double>();
      else if (k == "max_translation_mm") s.max_translation_mm = v.get<double>();
      else if (k == "sinusoid_amplitude_mm") s.sinusoid_amplitude_mm = v.get<double>();
      else if (k == "wavelength_frac") s.wavelength_frac = v.get<double>();
      else if (k == "max_bending_energy") s.max_bending_energy = v.get<double>();
      else if (k == "supersampling") s.supersampling = v.get<int>();
      else if (k == "moving") s.moving = json_rendering(v);
      else if (k == "fixed") s.fixed = json_rendering(v);
      else if (k == "seed") s.seed = v.get<std::uint64_t>();
      else throw ConfigError("unknown key '" + k + "' in phantom spec");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("phantom spec: ") + e.what());
  }
  try {
    s.validate();
  } catch (const PhantomError& e) {
    throw ConfigError(e.what());
  } catch (const GridError& e) {
    throw ConfigError(e.what());
  }
}

namespace {

struct Sphere {
  Eigen::Vector3d c;
  double r;
};

struct Anatomy {
  Eigen::Vector3d gland_centre;
  Eigen::Vector3d gland_axes;
  std::vector<Sphere> landmarks;

  bool in_gland(const Eigen::Vector3d& p) const {
    return ((p - gland_centre).cwiseQuotient(gland_axes)).squaredNorm() <= 1.0;
  }
};

// Smooth map from moving-image coordinates to the phantom (fixed) frame:
// phi(y) = y + w(y).
struct Deformation {
  Eigen::Vector3d centre;
  Eigen::Matrix3d A = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
  std::array<Eigen::Vector3d, 3> wave{};
  Eigen::Vector3d amp = Eigen::Vector3d::Zero();
  Eigen::Vector3d phase = Eigen::Vector3d::Zero();
  double scale = 1.0;

  Eigen::Vector3d w(const Eigen::Vector3d& y) const {
    const Eigen::Vector3d d = y - centre;
    Eigen::Vector3d s;
    for (int c = 0; c < 3; ++c) s[c] = amp[c] * std::sin(wave[static_cast<std::size_t>(c)].dot(d) + phase[c]);
    return scale * ((A - Eigen::Matrix3d::Identity()) * d + t + s);
  }
};

double uniform(std::mt19937_64& rng, double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); }

Anatomy draw_anatomy(const PhantomSpec& spec, std::mt19937_64& rng) {
  Anatomy a;
  for (int d = 0; d < 3; ++d) a.gland_axes[d] = uniform(rng, spec.gland_axes_min[d], spec.gland_axes_max[d]);
  a.gland_centre = spec.meta.center();
  for (int d = 0; d < 3; ++d) a.gland_centre[d] += uniform(rng, -spec.gland_jitter_mm, spec.gland_jitter_mm);
  const int L = std::uniform_int_distribution<int>(spec.landmarks_min, spec.landmarks_max)(rng);
  constexpr double margin = 0.3;
  for (int l = 0; l < L; ++l) {
    const double r = uniform(rng, spec.landmark_radius_min_mm, spec.landmark_radius_max_mm);
    const Eigen::Vector3d room = (a.gland_axes.array() - r - margin).max(1e-3).matrix();
    Sphere best{a.gland_centre, r};
    double best_gap = -1e300;
    for (int attempt = 0; attempt < 200; ++attempt) {
      Eigen::Vector3d q;
      do {
        for (int d = 0; d < 3; ++d) q[d] = uniform(rng, -1, 1);
      } while (q.squaredNorm() > 1.0);
      const Eigen::Vector3d c = a.gland_centre + q.cwiseProduct(room);
      double gap = 1e300;
      for (const auto& s : a.landmarks) gap = std::min(gap, (s.c - c).norm() - s.r - r);
      if (gap > best_gap) best = {c, r}, best_gap = gap;
      if (gap >= 0.5) break;
    }
    a.landmarks.push_back(best);
  }
  return a;
}

Deformation draw_deformation(const PhantomSpec& spec, std::mt19937_64& rng) {
  Deformation f;
  f.centre = spec.meta.center();
  const double deg = std::numbers::pi / 180.0;
  const Eigen::Matrix3d R = (Eigen::AngleAxisd(uniform(rng, -1, 1) * spec.max_rotation_deg * deg, Eigen::Vector3d::UnitZ()) *
                             Eigen::AngleAxisd(uniform(rng, -1, 1) * spec.max_rotation_deg * deg, Eigen::Vector3d::UnitY()) *
                             Eigen::AngleAxisd(uniform(rng, -1, 1) * spec.max_rotation_deg * deg, Eigen::Vector3d::UnitX()))
                                .toRotationMatrix();
  Eigen::Vector3d ls;
  for (int d = 0; d < 3; ++d) ls[d] = uniform(rng, -spec.max_log_scale, spec.max_log_scale);
  f.A = R * ls.array().exp().matrix().asDiagonal();
  for (int d = 0; d < 3; ++d) f.t[d] = uniform(rng, -spec.max_translation_mm, spec.max_translation_mm);
  const double k = 2 * std::numbers::pi / (spec.wavelength_frac * spec.meta.extent().maxCoeff());
  std::normal_distribution<double> n01;
  for (int c = 0; c < 3; ++c) {
    Eigen::Vector3d dir(n01(rng), n01(rng), n01(rng));
    f.wave[static_cast<std::size_t>(c)] = k * dir.normalized();
    f.amp[c] = uniform(rng, -1, 1) * spec.sinusoid_amplitude_mm;
    f.phase[c] = uniform(rng, 0, 2 * std::numbers::pi);
  }
  return f;
}

// u(x) = -w(x + u(x)) by fixed-point iteration; nullopt if it fails to
// converge.
std::optional<DisplacementField> inverse_field(const Deformation& f, const GridMeta& m) {
  DisplacementField u(m);
  for (int k = 0; k < m.dims[2]; ++k)
    for (int j = 0; j < m.dims[1]; ++j)
      for (int i = 0; i < m.dims[0]; ++i) {
        const Eigen::Vector3d x = m.position(i, j, k);
        Eigen::Vector3d v = Eigen::Vector3d::Zero();
        bool ok = false;
        for (int it = 0; it < 200; ++it) {
          const Eigen::Vector3d next = -f.w(x + v);
          const double step = (next - v).norm();
          v = next;
          if (step < 1e-10) {
            ok = true;
            break;
          }
        }
        if (!ok || !v.allFinite()) return std::nullopt;
        u.set(m.index(i, j, k), v.cast<float>());
      }
  return u;
}

struct Rendered {
  Volume tissue;  // un-remapped intensity in [0, 1]
  std::vector<LabelMask> labels;
};

// Supersampled label fractions and tissue intensity; `to_phantom` maps a
// point of the rendered grid into the phantom frame.
template <typename Map>
Rendered render(const PhantomSpec& spec, const Anatomy& a, const ModalityRendering& mod, const Map& to_phantom) {
  const GridMeta& m = spec.meta;
  const int S = spec.supersampling;
  const double inv = 1.0 / (S * S * S);
  Rendered r{Volume(m), std::vector<LabelMask>(1 + a.landmarks.size(), LabelMask(m))};
  std::vector<double> frac(r.labels.size());
  for (int k = 0; k < m.dims[2]; ++k)
    for (int j = 0; j < m.dims[1]; ++j)
      for (int i = 0; i < m.dims[0]; ++i) {
        const std::size_t v = m.index(i, j, k);
        std::fill(frac.begin(), frac.end(), 0.0);
        double tissue = 0;
        for (int c = 0; c < S; ++c)
          for (int b = 0; b < S; ++b)
            for (int q = 0; q < S; ++q) {
              const Eigen::Vector3d o((q + 0.5) / S - 0.5, (b + 0.5) / S - 0.5, (c + 0.5) / S - 0.5);
              const Eigen::Vector3d p = to_phantom(m.position(i, j, k) + o.cwiseProduct(m.spacing));
              const bool g = a.in_gland(p);
              bool lm = false;
              if (g) frac[0] += 1;
              for (std::size_t l = 0; l < a.landmarks.size(); ++l)
                if ((p - a.landmarks[l].c).squaredNorm() <= a.landmarks[l].r * a.landmarks[l].r) {
                  frac[l + 1] += 1;
                  lm = true;
                }
              tissue += lm ? mod.landmark : g ? mod.gland : mod.background;
            }
        for (std::size_t l = 0; l < frac.size(); ++l) r.labels[l].data[v] = static_cast<float>(frac[l] * inv);
        r.tissue.data[v] = static_cast<float>(tissue * inv);
      }
  return r;
}

Volume modality(const Volume& tissue, const ModalityRendering& mod, std::mt19937_64& rng) {
  Volume out(tissue.meta);
  std::normal_distribution<double> n01;
  for (std::size_t v = 0; v < tissue.size(); ++v) {
    double x = std::pow(std::clamp(static_cast<double>(tissue.data[v]), 0.0, 1.0), mod.gamma);
    if (mod.speckle > 0) x *= 1.0 + mod.speckle * n01(rng);
    if (mod.noise > 0) x += mod.noise * n01(rng);
    out.data[v] = static_cast<float>(x);
  }
  return normalize_intensity(out);
}

}  // namespace

PhantomCase synth_case(const PhantomSpec& spec, int case_index) {
  spec.validate();
  if (case_index < 0) throw PhantomError("case index must be >= 0");
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(case_index)};
  std::mt19937_64 rng(seq);
  const Anatomy anatomy = draw_anatomy(spec, rng);
  Deformation f = draw_deformation(spec, rng);

  std::optional<DisplacementField> gt;
  for (int attempt = 0; attempt < 10; ++attempt) {
    gt = inverse_field(f, spec.meta);
    if (gt) {
      const auto J = jacobian_determinant_map(*gt);
      const bool folded = *std::min_element(J.data.begin(), J.data.end()) <= 0.0f;
      const bool rough = regularizer(*gt, RegularizerKind::bending).value > spec.max_bending_energy;
      if (!folded && !rough) break;
    }
    gt.reset();
    f.scale *= 0.7;
  }
  if (!gt) throw PhantomError("case " + std::to_string(case_index) + ": no admissible deformation after 10 attempts");

  PhantomCase c;
  c.index = case_index;
  char id[32];
  std::snprintf(id, sizeof id, "case_%03d", case_index);
  c.id = id;
  c.magnitude = f.scale;
  c.ground_truth = std::move(*gt);
  const Rendered fixed = render(spec, anatomy, spec.fixed, [](const Eigen::Vector3d& p) { return p; });
  const Rendered moving = render(spec, anatomy, spec.moving, [&](const Eigen::Vector3d& y) -> Eigen::Vector3d { return y + f.w(y); });
  c.moving = modality(moving.tissue, spec.moving, rng);
  c.fixed = modality(fixed.tissue, spec.fixed, rng);
  for (std::size_t l = 0; l < fixed.labels.size(); ++l) c.labels.push_back({moving.labels[l], fixed.labels[l]});
  return c;
}

PhantomCorpus synth_corpus(const PhantomSpec& spec, int n_train, int n_heldout) {
  if (n_train < 0 || n_heldout < 0) throw PhantomError("case counts must be >= 0");
  PhantomCorpus c{spec, {}, {}};
  for (int i = 0; i < n_train; ++i) c.train.push_back(synth_case(spec, i));
  for (int i = 0; i < n_heldout; ++i) c.heldout.push_back(synth_case(spec, n_train + i));
  return c;
}

TrainingCorpus to_training_corpus(const std::vector<PhantomCase>& cases) {
  TrainingCorpus t;
  for (const auto& c : cases) t.entries.push_back({c.id, c.moving, c.fixed, c.labels});
  return t;
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "heldout") return Split::heldout;
  if (s == "all") return Split::all;
  throw ConfigError("split must be train, heldout or all, got " + s);
}

std::filesystem::path write_corpus(const PhantomCorpus& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json cases = json::array();
  auto emit = [&](const PhantomCase& pc, const char* split) {
    const std::string d = pc.id + "/";
    write_volume(pc.moving, dir / (d + "moving"));
    write_volume(pc.fixed, dir / (d + "fixed"));
    write_volume(pc.ground_truth, dir / (d + "ground_truth"));
    json labels = json::array();
    for (std::size_t l = 0; l < pc.labels.size(); ++l) {
      char name[32];
      std::snprintf(name, sizeof name, "label_%02zu", l);
      write_volume(pc.labels[l].moving, dir / (d + name + "_moving"));
      write_volume(pc.labels[l].fixed, dir / (d + name + "_fixed"));
      labels.push_back({{"role", l == 0 ? "gland" : "landmark"},
                        {"moving", d + name + "_moving"},
                        {"fixed", d + name + "_fixed"}});
    }
    cases.push_back({{"id", pc.id},
                     {"index", pc.index},
                     {"split", split},
                     {"moving", d + "moving"},
                     {"fixed", d + "fixed"},
                     {"ground_truth", d + "ground_truth"},
                     {"magnitude", pc.magnitude},
                     {"labels", labels}});
  };
  for (const auto& pc : c.train) emit(pc, "train");
  for (const auto& pc : c.heldout) emit(pc, "heldout");
  const auto path = dir / "manifest.json";
  write_json(json{{"format", "weakreg-corpus"}, {"version", 1}, {"spec", c.spec}, {"cases", cases}}, path);
  return path;
}

std::vector<PhantomCase> read_corpus(const std::filesystem::path& manifest, Split split) {
  const json m = read_json(manifest);
  if (m.value("format", "") != "weakreg-corpus") throw ConfigError(manifest.string() + ": not a corpus manifest");
  const auto base = manifest.parent_path();
  std::vector<PhantomCase> out;
  try {
    for (const auto& e : m.at("cases")) {
      const std::string s = e.value("split", "train");
      if (split == Split::train && s != "train") continue;
      if (split == Split::heldout && s != "heldout") continue;
      PhantomCase c;
      c.id = e.at("id").get<std::string>();
      c.index = e.value("index", static_cast<int>(out.size()));
      c.magnitude = e.value("magnitude", 1.0);
      c.moving = read_volume(base / e.at("moving").get<std::string>());
      c.fixed = read_volume(base / e.at("fixed").get<std::string>());
      if (e.contains("ground_truth")) c.ground_truth = read_ddf(base / e.at("ground_truth").get<std::string>());
      for (const auto& l : e.at("labels"))
        c.labels.push_back({read_label(base / l.at("moving").get<std::string>()),
                            read_label(base / l.at("fixed").get<std::string>())});
      out.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    throw ConfigError(manifest.string() + ": " + e.what());
  }
  return out;
}

}  // namespace weakreg

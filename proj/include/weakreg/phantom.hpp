#ifndef WEAKREG_PHANTOM_HPP_
#define WEAKREG_PHANTOM_HPP_

#include "json.hpp"
#include "weakreg/grid.hpp"
#include "weakreg/training.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace weakreg {

class PhantomError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rendering of one pseudo-modality. Tissue classes are mapped to
/// background/gland/landmark intensities, remapped by v -> v^gamma, then
/// multiplied by (1 + speckle * n) and offset by noise * n' with n, n'
/// standard normal. The result is normalised to zero mean, unit variance.
struct ModalityRendering {
  double background = 0.15;
  double gland = 0.5;
  double landmark = 0.9;
  double gamma = 1.0;
  double speckle = 0.0;
  double noise = 0.0;
};

struct PhantomSpec {
  GridMeta meta{{32, 32, 32}, 0.8};
  /// Gland semi-axes (mm) are drawn per case in [min, max] on each axis.
  Eigen::Vector3d gland_axes_min{7.5, 6.5, 5.5};
  Eigen::Vector3d gland_axes_max{9.5, 8.5, 7.5};
  /// Gland centre offset from the grid centre, uniform in +-this (mm).
  double gland_jitter_mm = 1.0;
  int landmarks_min = 2;
  int landmarks_max = 6;
  double landmark_radius_min_mm = 1.2;
  double landmark_radius_max_mm = 2.2;
  /// Ground-truth deformation: rotation about the centre (degrees), log
  /// scale per axis, translation (mm) and a low-frequency sinusoid amplitude
  /// (mm) with wavelength equal to the grid extent times `wavelength_frac`.
  double max_rotation_deg = 6.0;
  double max_log_scale = 0.06;
  double max_translation_mm = 2.0;
  double sinusoid_amplitude_mm = 1.2;
  double wavelength_frac = 1.0;
  /// Upper bound on the bending energy of every generated field.
  double max_bending_energy = 0.01;
  int supersampling = 3;
  ModalityRendering moving{0.15, 0.5, 0.9, 0.5, 0.15, 0.0};
  ModalityRendering fixed{0.15, 0.5, 0.9, 2.0, 0.0, 0.1};
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const PhantomSpec& s);
void from_json(const nlohmann::json& j, PhantomSpec& s);

/// One generated case. Label 0 is the gland, the rest are landmarks.
struct PhantomCase {
  std::string id;
  int index = 0;
  Volume moving;
  Volume fixed;
  std::vector<LabelPair> labels;
  /// Ground-truth DDF on the fixed grid: fixed x corresponds to moving
  /// x + u(x).
  DisplacementField ground_truth;
  /// Scale factor applied to the nominal deformation magnitude after
  /// Jacobian-positivity retries (1 when the first draw was accepted).
  double magnitude = 1.0;
};

/// Renders a single case with index `case_index`; each case draws from its
/// own RNG seeded by (spec.seed, case_index).
PhantomCase synth_case(const PhantomSpec& spec, int case_index);

/// Cases 0..n_train-1 form the training split, the next n_heldout the
/// held-out split.
struct PhantomCorpus {
  PhantomSpec spec;
  std::vector<PhantomCase> train;
  std::vector<PhantomCase> heldout;
};

PhantomCorpus synth_corpus(const PhantomSpec& spec, int n_train, int n_heldout);

TrainingCorpus to_training_corpus(const std::vector<PhantomCase>& cases);

/// Writes every case as volume files under `dir` plus `dir/manifest.json`.
/// Returns the manifest path.
std::filesystem::path write_corpus(const PhantomCorpus& c, const std::filesystem::path& dir);

enum class Split { train, heldout, all };

Split parse_split(const std::string& s);

/// Reads the cases of one split from a manifest. Paths in the manifest are
/// relative to its directory. Ground truth is loaded when present.
std::vector<PhantomCase> read_corpus(const std::filesystem::path& manifest, Split split);

}  // namespace weakreg

#endif  // WEAKREG_PHANTOM_HPP_

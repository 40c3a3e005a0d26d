#ifndef WEAKREG_EVALUATION_HPP_
#define WEAKREG_EVALUATION_HPP_

#include "json.hpp"
#include "weakreg/checkpoint.hpp"
#include "weakreg/phantom.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace weakreg {

/// Per-pair centroid distances (mm) and their RMS. Pairs where either label
/// is empty are skipped and listed in `excluded`.
struct TreResult {
  std::vector<double> distances;
  std::vector<int> excluded;
  double tre = 0;
  bool valid() const { return !distances.empty(); }
};

TreResult tre(const std::vector<LabelMask>& warped, const std::vector<LabelMask>& fixed);

/// Binary Dice of the masks thresholded at 0.5; nullopt when both are empty.
std::optional<double> dsc(const LabelMask& warped, const LabelMask& fixed);

/// Linear interpolation between order statistics at p/100 * (n - 1).
double percentile(std::vector<double> values, double p);

struct Summary {
  double median = 0;
  double p10 = 0, p25 = 0, p75 = 0, p90 = 0;
  int n = 0;
};

Summary summarize(const std::vector<double>& values);

struct CaseReport {
  std::string id;
  int index = 0;
  std::vector<double> distances;
  std::vector<int> excluded_landmarks;
  std::optional<double> tre;
  std::optional<double> initial_tre;
  std::optional<double> dsc;
  std::optional<double> initial_dsc;
  long negative_jacobian_voxels = 0;
  double jacobian_min = 0;
  double jacobian_std = 0;
};

struct EvalReport {
  std::vector<CaseReport> cases;
  Summary tre;
  Summary dsc;
  Summary initial_tre;
  Summary initial_dsc;
  long negative_jacobian_voxels = 0;
  nlohmann::json metadata = nlohmann::json::object();
};

/// Predicts the DDF for one case from its images (or, for the ground-truth
/// oracle, from the stored field).
using DdfPredictor = std::function<DisplacementField(const PhantomCase&)>;

/// Label 0 of each case is the gland (DSC only); labels 1.. are landmarks
/// (TRE only). With `maps_dir`, writes per case the warped moving image and
/// the Jacobian-determinant, displacement-magnitude and gradient-norm maps.
EvalReport evaluate(const std::vector<PhantomCase>& cases, const DdfPredictor& predict,
                    const std::filesystem::path& maps_dir = {});

nlohmann::json to_json(const EvalReport& r);
/// One row per metric: metric,n,p10,p25,median,p75,p90.
void write_percentile_csv(const EvalReport& r, std::ostream& out);

/// Batch-norm statistics at inference. Training normalises every pair with
/// its own statistics, so `per_pair` is the default; `running` uses the
/// momentum averages stored in the checkpoint.
enum class NormStats { per_pair, running };

NormStats parse_norm_stats(const std::string& s);
std::string to_string(NormStats s);

/// Inference from checkpoints: a DDF-head network, an affine-head network,
/// or both, in which case the local network sees the affinely pre-warped
/// moving image and the result is compose(affine, local).
class Registrator {
 public:
  explicit Registrator(Checkpoint ckpt, NormStats stats = NormStats::per_pair);
  Registrator(Checkpoint global, Checkpoint local, NormStats stats = NormStats::per_pair);

  DisplacementField operator()(const Volume& moving, const Volume& fixed) const;

  /// Grid the checkpoint(s) accept: dims divisible by 16.
  void check_grid(const GridMeta& m) const;

 private:
  DisplacementField run(const Checkpoint& c, const Volume& moving, const Volume& fixed) const;

  std::optional<Checkpoint> global_;
  std::optional<Checkpoint> local_;
  NormStats stats_;
};

}  // namespace weakreg

#endif  // WEAKREG_EVALUATION_HPP_

#ifndef WEAKREG_TRAINER_HPP_
#define WEAKREG_TRAINER_HPP_

#include "weakreg/checkpoint.hpp"
#include "weakreg/training.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>

namespace weakreg {

/// Mean over the K slots of one iteration, evaluated before the update.
struct IterationRecord {
  long iteration = 0;
  double similarity = 0;
  double regularizer = 0;
  double total = 0;
};

void write_trace_header(std::ostream& out);
void write_trace_row(std::ostream& out, const IterationRecord& r);

/// The optimisation loop. Every iteration draws its minibatch and
/// augmentations from an RNG seeded by (seed, iteration), so a resumed run
/// continues exactly where an uninterrupted one would be.
class Trainer {
 public:
  Trainer(const TrainingCorpus& corpus, const NetworkConfig& net, const TrainConfig& cfg);
  Trainer(const TrainingCorpus& corpus, Checkpoint resume);
  ~Trainer();

  /// One iteration: sample, augment, forward, loss, backward, Adam, running
  /// statistics. Throws NonFiniteError on a non-finite loss or gradient,
  /// leaving the parameters untouched.
  IterationRecord step();

  /// Loss of a given minibatch without updating anything (used to compare
  /// filtering modes).
  IterationRecord evaluate_iteration(long iteration) const;

  /// Runs until `iteration() == cfg.iterations`. With a directory, writes
  /// `checkpoint` there every checkpoint_interval iterations and at the end,
  /// and appends to `loss.csv`. On divergence the last written checkpoint
  /// stays on disk and the error propagates.
  void run(const std::filesystem::path& out_dir = {},
           const std::function<void(const IterationRecord&)>& on_iteration = {});

  long iteration() const { return ckpt_.iteration; }
  const ParameterStore<float>& store() const { return ckpt_.store; }
  const Checkpoint& checkpoint() const { return ckpt_; }

 private:
  IterationRecord compute(long iteration, Gradients<float>* grads,
                          std::vector<std::vector<std::pair<int, VectorX<float>>>>* stats) const;

  const TrainingCorpus& corpus_;
  Checkpoint ckpt_;
  std::unique_ptr<RegNet<float>> net_;
  std::unique_ptr<MultiscaleFilter<float>> filter_;
};

std::mt19937_64 iteration_rng(std::uint64_t seed, long iteration);

struct UnbiasednessReport {
  /// Per-slot marginal probability of each (entry, pair) from enumerating
  /// the two-stage sample space.
  std::vector<std::pair<SlotIndex, double>> pair_weights;
  /// max |E[minibatch gradient] - full gradient| over all enumerable
  /// minibatches (NaN when the space is too large to enumerate).
  double enumeration_max_error = 0;
  long enumerated_minibatches = 0;
  /// Monte-Carlo comparison.
  long draws = 0;
  std::size_t components = 0;
  std::size_t varying_components = 0;
  double fraction_within_3se = 0;
  /// Exact full-batch gradient, and the expected per-slot loss.
  std::vector<double> exact_gradient;
  double exact_loss = 0;
  double enumerated_loss = 0;
};

/// Compares the two-stage minibatch gradient estimator against the full
/// objective gradient (weights 1/N * 1/M_n) on a small corpus, by exact
/// enumeration and by Monte-Carlo sampling with the real sampler.
/// Augmentation is not applied.
UnbiasednessReport unbiasedness_check(const BasicTrainingCorpus<double>& corpus, const NetworkConfig& net,
                                      const ParameterStore<double>& store, const LossSettings<double>& loss, int K,
                                      long draws, std::uint64_t seed);

}  // namespace weakreg

#endif  // WEAKREG_TRAINER_HPP_

#ifndef WEAKREG_TRAINING_HPP_
#define WEAKREG_TRAINING_HPP_

#include "weakreg/loss.hpp"
#include "weakreg/network.hpp"
#include "weakreg/spatial.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace weakreg {

template <typename Scalar>
struct BasicLabelPair {
  BasicLabelMask<Scalar> moving;
  BasicLabelMask<Scalar> fixed;
};

template <typename Scalar>
struct BasicCorpusEntry {
  std::string id;
  BasicVolume<Scalar> moving;
  BasicVolume<Scalar> fixed;
  std::vector<BasicLabelPair<Scalar>> labels;
};

template <typename Scalar>
struct BasicTrainingCorpus {
  std::vector<BasicCorpusEntry<Scalar>> entries;

  std::size_t size() const { return entries.size(); }

  std::vector<int> label_counts() const {
    std::vector<int> m;
    for (const auto& e : entries) m.push_back(static_cast<int>(e.labels.size()));
    return m;
  }

  const GridMeta& meta() const {
    if (entries.empty()) throw std::invalid_argument("empty corpus");
    return entries.front().fixed.meta;
  }

  void validate() const {
    if (entries.empty()) throw std::invalid_argument("corpus has no entries");
    const GridMeta& m = meta();
    for (const auto& e : entries) {
      if (e.labels.empty()) throw std::invalid_argument("corpus entry " + e.id + " has no label pairs");
      if (e.moving.meta != m || e.fixed.meta != m) throw GridError("corpus entry " + e.id + ": image grid mismatch");
      for (const auto& l : e.labels)
        if (l.moving.meta != m || l.fixed.meta != m) throw GridError("corpus entry " + e.id + ": label grid mismatch");
    }
  }

  template <typename To>
  BasicTrainingCorpus<To> cast() const {
    BasicTrainingCorpus<To> out;
    for (const auto& e : entries) {
      BasicCorpusEntry<To> f{e.id, weakreg::cast<To>(e.moving), weakreg::cast<To>(e.fixed), {}};
      for (const auto& l : e.labels) f.labels.push_back({weakreg::cast<To>(l.moving), weakreg::cast<To>(l.fixed)});
      out.entries.push_back(std::move(f));
    }
    return out;
  }
};

using LabelPair = BasicLabelPair<float>;
using CorpusEntry = BasicCorpusEntry<float>;
using TrainingCorpus = BasicTrainingCorpus<float>;

/// One minibatch slot: entry n and label pair m within it.
struct SlotIndex {
  int entry = 0;
  int pair = 0;
  bool operator==(const SlotIndex&) const = default;
  auto operator<=>(const SlotIndex&) const = default;
};

/// Two-stage sampling: K entries uniformly with replacement, then one label
/// pair uniformly within each drawn entry.
template <typename Rng>
std::vector<SlotIndex> sample_minibatch(std::span<const int> label_counts, int K, Rng& rng) {
  if (label_counts.empty()) throw std::invalid_argument("sample_minibatch: empty corpus");
  if (K < 1) throw std::invalid_argument("sample_minibatch: K must be >= 1");
  std::uniform_int_distribution<int> entry(0, static_cast<int>(label_counts.size()) - 1);
  std::vector<SlotIndex> out(static_cast<std::size_t>(K));
  for (auto& s : out) s.entry = entry(rng);
  for (auto& s : out) {
    const int m = label_counts[static_cast<std::size_t>(s.entry)];
    if (m < 1) throw std::invalid_argument("sample_minibatch: entry without label pairs");
    s.pair = std::uniform_int_distribution<int>(0, m - 1)(rng);
  }
  return out;
}

template <typename Scalar, typename Rng>
std::vector<SlotIndex> sample_minibatch(const BasicTrainingCorpus<Scalar>& corpus, int K, Rng& rng) {
  const auto counts = corpus.label_counts();
  return sample_minibatch<Rng>(counts, K, rng);
}

/// Per-slot probability of every (entry, pair) under the two-stage scheme,
/// by enumerating stage 1 x stage 2 outcomes.
std::vector<std::pair<SlotIndex, double>> pair_probabilities(std::span<const int> label_counts);

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam on every trainable parameter (no weight decay), then
/// zeroes the gradients. Checks all gradients before touching anything.
template <typename Scalar>
void adam_step(ParameterStore<Scalar>& store, double lr, long t, const AdamConfig& cfg = {}) {
  if (t < 1) throw std::invalid_argument("adam_step: t must be >= 1");
  if (!(lr > 0)) throw std::invalid_argument("adam_step: lr must be > 0");
  for (const auto& p : store.params)
    if (p.trainable() && !p.grad.allFinite()) throw NonFiniteError("non-finite gradient in " + p.name);
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (auto& p : store.params) {
    if (!p.trainable()) continue;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double g = static_cast<double>(p.grad.data()[i]);
      const double m = cfg.beta1 * static_cast<double>(p.adam_m.data()[i]) + (1 - cfg.beta1) * g;
      const double v = cfg.beta2 * static_cast<double>(p.adam_v.data()[i]) + (1 - cfg.beta2) * g * g;
      p.adam_m.data()[i] = static_cast<Scalar>(m);
      p.adam_v.data()[i] = static_cast<Scalar>(v);
      const double step = lr * (m / c1) / (std::sqrt(v / c2) + cfg.epsilon);
      p.value.data()[i] = static_cast<Scalar>(static_cast<double>(p.value.data()[i]) - step);
    }
  }
  store.zero_grad();
}

inline constexpr double kDefaultLearningRate = 1e-5;
inline constexpr double kAffineLearningRate = 1e-6;
/// Learning rate used for the 32^3, n0 = 4 phantom experiments.
inline constexpr double kDeskLearningRate = 1e-4;

struct TrainConfig {
  int batch_size = 4;
  double learning_rate = kDefaultLearningRate;
  double alpha = kBaselineAlpha;
  SimilarityKind similarity = SimilarityKind::dice;
  RegularizerKind regularizer = RegularizerKind::bending;
  int iterations = 1000;
  std::uint64_t seed = 0;
  AugmentationConfig augmentation{};
  bool prefilter = false;
  MultiscaleConfig multiscale{};
  AdamConfig adam{};
  int checkpoint_interval = 0;  // 0: only the final checkpoint
  int threads = 1;              // slot-parallel workers; reduction order is fixed

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
    if (!(alpha >= 0)) throw std::invalid_argument("alpha must be >= 0");
    if (iterations < 0) throw std::invalid_argument("iterations must be >= 0");
    if (checkpoint_interval < 0) throw std::invalid_argument("checkpoint_interval must be >= 0");
    if (threads < 1) throw std::invalid_argument("threads must be >= 1");
    augmentation.validate();
    multiscale.validate();
  }
};

/// Loss-side settings shared by training, evaluation of the objective and
/// the unbiasedness check.
template <typename Scalar>
struct LossSettings {
  SimilarityKind similarity = SimilarityKind::dice;
  RegularizerKind regularizer = RegularizerKind::bending;
  double alpha = kBaselineAlpha;
  const MultiscaleFilter<Scalar>* filter = nullptr;
  bool prefilter = false;
};

/// Loss terms of one slot: similarity, regulariser and -J + alpha * Omega.
struct SlotLoss {
  double similarity = 0;
  double regularizer = 0;
  double total = 0;
  std::vector<double> per_scale;
};

/// Filtered copies of a label at every scale of `filter`.
template <typename Scalar>
std::vector<std::vector<Scalar>> filter_stack(const MultiscaleFilter<Scalar>& filter,
                                              const BasicLabelMask<Scalar>& l) {
  std::vector<std::vector<Scalar>> s;
  for (int i = 0; i < filter.scales(); ++i) s.push_back(filter.apply(i, l.data));
  return s;
}

/// Inputs of one slot after augmentation. Pre-filtered stacks are only used
/// when the settings ask for them.
template <typename Scalar>
struct SlotInputs {
  BasicVolume<Scalar> moving;
  BasicVolume<Scalar> fixed;
  BasicLabelMask<Scalar> moving_label;
  BasicLabelMask<Scalar> fixed_label;
  std::vector<std::vector<Scalar>> moving_stack;
  std::vector<std::vector<Scalar>> fixed_stack;
};

/// Similarity and regulariser for a given DDF, plus d(loss)/d(ddf) scaled by
/// `weight`.
template <typename Scalar>
SlotLoss loss_for_ddf(const SlotInputs<Scalar>& in, const VectorGrid<Scalar>& ddf, const LossSettings<Scalar>& ls,
                      double weight, VectorGrid<Scalar>* d_ddf) {
  if (!ls.filter) throw std::invalid_argument("loss settings need a multiscale filter");
  SlotLoss out;
  VectorGrid<Scalar> g_sim(ddf.meta);
  if (ls.prefilter) {
    const int Z = ls.filter->scales();
    if (static_cast<int>(in.moving_stack.size()) != Z || static_cast<int>(in.fixed_stack.size()) != Z)
      throw std::invalid_argument("prefilter mode needs filtered label stacks");
    std::vector<std::vector<Scalar>> warped;
    for (int s = 0; s < Z; ++s)
      warped.push_back(detail::warp_channels<Scalar>(in.moving_stack[static_cast<std::size_t>(s)],
                                                     in.moving_label.meta, 1, ddf));
    const auto sim = stacked_similarity(in.fixed_stack, warped, ls.similarity);
    out.similarity = static_cast<double>(sim.value);
    for (auto v : sim.per_scale) out.per_scale.push_back(static_cast<double>(v));
    if (d_ddf) {
      const std::size_t V = ddf.voxels();
      for (int s = 0; s < Z; ++s)
        detail::warp_channels_backward<Scalar>(
            in.moving_stack[static_cast<std::size_t>(s)], in.moving_label.meta, 1, ddf,
            std::span<const Scalar>(sim.d_warped.data() + static_cast<std::size_t>(s) * V, V), nullptr, &g_sim);
    }
  } else {
    const auto warped = warp(in.moving_label, ddf);
    const auto sim = ls.similarity == SimilarityKind::dice
                         ? multiscale_dice(in.fixed_label, warped, *ls.filter)
                         : multiscale_cross_entropy(in.fixed_label, warped, *ls.filter);
    out.similarity = static_cast<double>(sim.value);
    for (auto v : sim.per_scale) out.per_scale.push_back(static_cast<double>(v));
    if (d_ddf)
      detail::warp_channels_backward<Scalar>(in.moving_label.data, in.moving_label.meta, 1, ddf, sim.d_warped,
                                             nullptr, &g_sim);
  }
  const auto reg = regularizer(ddf, ls.regularizer);
  out.regularizer = static_cast<double>(reg.value);
  out.total = total_loss(out.similarity, out.regularizer, ls.alpha);
  if (d_ddf) {
    const Scalar ws = static_cast<Scalar>(-weight), wr = static_cast<Scalar>(weight * ls.alpha);
    d_ddf->vec() += ws * g_sim.vec() + wr * reg.grad.vec();
  }
  return out;
}

/// Forward, loss and backward for one slot. Gradients (scaled by `weight`)
/// are accumulated into `grads`; training-mode batch statistics are
/// returned through `batch_stats` when given.
template <typename Scalar>
SlotLoss slot_forward_backward(const RegNet<Scalar>& net, const ParameterStore<Scalar>& store,
                               const SlotInputs<Scalar>& in, const LossSettings<Scalar>& ls, double weight,
                               std::type_identity_t<Gradients<Scalar>>* grads,
                               std::type_identity_t<std::vector<std::pair<int, VectorX<Scalar>>>>* batch_stats = nullptr) {
  const bool affine = net.config().head == HeadKind::affine;
  ForwardState<Scalar> st = affine ? net.forward_affine(in.moving, in.fixed, store, true)
                                   : net.forward(in.moving, in.fixed, store, true);
  if (!all_finite(st.ddf.data)) throw NonFiniteError("non-finite displacement field");
  VectorGrid<Scalar> d_ddf(st.ddf.meta);
  SlotLoss out = loss_for_ddf(in, st.ddf, ls, weight, grads ? &d_ddf : nullptr);
  if (grads) {
    if (affine)
      net.backward_affine(st, affine_to_ddf_backward(d_ddf), store, *grads);
    else
      net.backward(st, d_ddf, store, *grads);
  }
  if (batch_stats) *batch_stats = std::move(st.batch_stats);
  return out;
}

/// Builds slot inputs from a corpus entry; applies an independent random
/// affine to each side when augmentation is enabled (image and label of a
/// side share the draw).
template <typename Scalar, typename Rng>
SlotInputs<Scalar> make_slot_inputs(const BasicTrainingCorpus<Scalar>& corpus, SlotIndex s,
                                    const AugmentationConfig& aug, Rng& rng, const MultiscaleFilter<Scalar>* filter,
                                    bool prefilter) {
  const auto& e = corpus.entries.at(static_cast<std::size_t>(s.entry));
  const auto& lp = e.labels.at(static_cast<std::size_t>(s.pair));
  SlotInputs<Scalar> in{e.moving, e.fixed, lp.moving, lp.fixed, {}, {}};
  std::optional<VectorGrid<Scalar>> am, af;
  if (aug.enabled) {
    const GridMeta& m = e.fixed.meta;
    am = affine_to_ddf<Scalar>(random_affine(m, rng, aug), m);
    af = affine_to_ddf<Scalar>(random_affine(m, rng, aug), m);
    in.moving = warp(e.moving, *am);
    in.moving_label = warp(lp.moving, *am);
    in.fixed = warp(e.fixed, *af);
    in.fixed_label = warp(lp.fixed, *af);
  }
  if (prefilter) {
    if (!filter) throw std::invalid_argument("prefilter mode needs a multiscale filter");
    // Filter the stored labels, then carry each scale through the augmentation warp.
    auto stack_of = [&](const BasicLabelMask<Scalar>& l, const std::optional<VectorGrid<Scalar>>& a) {
      auto st = filter_stack(*filter, l);
      if (a)
        for (auto& v : st) v = detail::warp_channels<Scalar>(v, l.meta, 1, *a);
      return st;
    };
    in.moving_stack = stack_of(lp.moving, am);
    in.fixed_stack = stack_of(lp.fixed, af);
  }
  return in;
}

}  // namespace weakreg

#endif  // WEAKREG_TRAINING_HPP_

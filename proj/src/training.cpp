#include "weakreg/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <map>
#include <thread>

namespace weakreg {

std::vector<std::pair<SlotIndex, double>> pair_probabilities(std::span<const int> label_counts) {
  if (label_counts.empty()) throw std::invalid_argument("pair_probabilities: empty corpus");
  const double N = static_cast<double>(label_counts.size());
  std::vector<std::pair<SlotIndex, double>> out;
  for (std::size_t n = 0; n < label_counts.size(); ++n) {
    const int M = label_counts[n];
    if (M < 1) throw std::invalid_argument("pair_probabilities: entry without label pairs");
    for (int m = 0; m < M; ++m) out.push_back({SlotIndex{static_cast<int>(n), m}, (1.0 / N) * (1.0 / M)});
  }
  return out;
}

std::mt19937_64 iteration_rng(std::uint64_t seed, long iteration) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(iteration), static_cast<std::uint32_t>(
                                                               static_cast<std::uint64_t>(iteration) >> 32)};
  return std::mt19937_64(seq);
}

void write_trace_header(std::ostream& out) { out << "iteration,similarity,regularizer,total\n"; }

void write_trace_row(std::ostream& out, const IterationRecord& r) {
  out << r.iteration << ',' << std::setprecision(17) << r.similarity << ',' << r.regularizer << ',' << r.total
      << '\n';
}

Trainer::Trainer(const TrainingCorpus& corpus, const NetworkConfig& net, const TrainConfig& cfg)
    : Trainer(corpus, initial_checkpoint(net, cfg)) {}

Trainer::Trainer(const TrainingCorpus& corpus, Checkpoint resume) : corpus_(corpus), ckpt_(std::move(resume)) {
  corpus_.validate();
  ckpt_.training.validate();
  net_ = std::make_unique<RegNet<float>>(ckpt_.network);
  net_->check_store(ckpt_.store);
  RegNet<float>::check_input(corpus_.meta(), corpus_.meta());
  filter_ = std::make_unique<MultiscaleFilter<float>>(ckpt_.training.multiscale, corpus_.meta());
}

Trainer::~Trainer() = default;

IterationRecord Trainer::compute(long iteration, Gradients<float>* grads,
                                 std::vector<std::vector<std::pair<int, VectorX<float>>>>* stats) const {
  const TrainConfig& cfg = ckpt_.training;
  auto rng = iteration_rng(cfg.seed, iteration);
  const auto slots = sample_minibatch(corpus_, cfg.batch_size, rng);
  std::vector<SlotInputs<float>> inputs;
  inputs.reserve(slots.size());
  for (const auto& s : slots)
    inputs.push_back(make_slot_inputs(corpus_, s, cfg.augmentation, rng, filter_.get(), cfg.prefilter));

  LossSettings<float> ls{cfg.similarity, cfg.regularizer, cfg.alpha, filter_.get(), cfg.prefilter};
  const std::size_t K = slots.size();
  const double weight = 1.0 / static_cast<double>(K);
  std::vector<SlotLoss> losses(K);
  std::vector<Gradients<float>> slot_grads(grads ? K : 0);
  std::vector<std::vector<std::pair<int, VectorX<float>>>> slot_stats(K);

  auto work = [&](std::size_t k) {
    Gradients<float>* g = nullptr;
    if (grads) {
      slot_grads[k] = zero_gradients(ckpt_.store);
      g = &slot_grads[k];
    }
    losses[k] = slot_forward_backward(*net_, ckpt_.store, inputs[k], ls, weight, g, &slot_stats[k]);
  };
  const int threads = std::min<int>(cfg.threads, static_cast<int>(K));
  if (threads <= 1) {
    for (std::size_t k = 0; k < K; ++k) work(k);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t k = static_cast<std::size_t>(t); k < K; k += static_cast<std::size_t>(threads)) work(k);
      });
    for (auto& th : pool) th.join();
  }

  IterationRecord r;
  r.iteration = iteration;
  for (const auto& l : losses) {
    r.similarity += l.similarity * weight;
    r.regularizer += l.regularizer * weight;
    r.total += l.total * weight;
  }
  if (grads) {
    *grads = zero_gradients(ckpt_.store);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t i = 0; i < grads->size(); ++i) (*grads)[i] += slot_grads[k][i];
  }
  if (stats) *stats = std::move(slot_stats);
  return r;
}

IterationRecord Trainer::evaluate_iteration(long iteration) const { return compute(iteration, nullptr, nullptr); }

IterationRecord Trainer::step() {
  Gradients<float> grads;
  std::vector<std::vector<std::pair<int, VectorX<float>>>> stats;
  const IterationRecord r = compute(ckpt_.iteration, &grads, &stats);
  if (!std::isfinite(r.total) || !std::isfinite(r.similarity) || !std::isfinite(r.regularizer))
    throw NonFiniteError("non-finite loss at iteration " + std::to_string(r.iteration));
  for (std::size_t i = 0; i < grads.size(); ++i) ckpt_.store.params[i].grad = grads[i];
  try {
    adam_step(ckpt_.store, ckpt_.training.learning_rate, ckpt_.iteration + 1, ckpt_.training.adam);
  } catch (const NonFiniteError&) {
    ckpt_.store.zero_grad();
    throw;
  }
  ForwardState<float> fold;
  for (auto& s : stats) {
    fold.batch_stats = std::move(s);
    net_->update_running_stats(fold, ckpt_.store);
  }
  ++ckpt_.iteration;
  return r;
}

void Trainer::run(const std::filesystem::path& out_dir, const std::function<void(const IterationRecord&)>& on_iteration) {
  std::ofstream trace;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    const auto p = out_dir / "loss.csv";
    const bool fresh = ckpt_.iteration == 0 || !std::filesystem::exists(p);
    trace.open(p, fresh ? std::ios::trunc : std::ios::app);
    if (fresh) write_trace_header(trace);
  }
  const int interval = ckpt_.training.checkpoint_interval;
  while (ckpt_.iteration < ckpt_.training.iterations) {
    const IterationRecord r = step();
    if (trace.is_open()) write_trace_row(trace, r);
    if (on_iteration) on_iteration(r);
    if (!out_dir.empty() && interval > 0 && ckpt_.iteration % interval == 0) {
      trace.flush();
      save_checkpoint(ckpt_, out_dir / "checkpoint");
    }
  }
  if (!out_dir.empty()) save_checkpoint(ckpt_, out_dir / "checkpoint");
}

UnbiasednessReport unbiasedness_check(const BasicTrainingCorpus<double>& corpus, const NetworkConfig& net_cfg,
                                      const ParameterStore<double>& store, const LossSettings<double>& loss, int K,
                                      long draws, std::uint64_t seed) {
  corpus.validate();
  if (K < 1) throw std::invalid_argument("unbiasedness_check: K must be >= 1");
  const RegNet<double> net(net_cfg);
  const auto counts = corpus.label_counts();
  UnbiasednessReport rep;
  rep.pair_weights = pair_probabilities(counts);
  const std::size_t P = rep.pair_weights.size();

  // Flattened per-pair slot gradients over all trainable scalars.
  std::vector<std::size_t> trainable;
  std::size_t D = 0;
  for (std::size_t i = 0; i < store.size(); ++i)
    if (store.params[i].trainable()) {
      trainable.push_back(i);
      D += static_cast<std::size_t>(store.params[i].value.size());
    }
  Eigen::MatrixXd G(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(P));
  std::vector<double> pair_loss(P);
  AugmentationConfig no_aug;
  no_aug.enabled = false;
  std::mt19937_64 unused(0);
  for (std::size_t p = 0; p < P; ++p) {
    auto grads = zero_gradients(store);
    const auto in = make_slot_inputs(corpus, rep.pair_weights[p].first, no_aug, unused, loss.filter, loss.prefilter);
    pair_loss[p] = slot_forward_backward(net, store, in, loss, 1.0, &grads).total;
    Eigen::Index row = 0;
    for (std::size_t i : trainable) {
      const auto& g = grads[i];
      G.col(static_cast<Eigen::Index>(p)).segment(row, g.size()) = Eigen::Map<const Eigen::VectorXd>(g.data(), g.size());
      row += g.size();
    }
  }
  Eigen::VectorXd w(static_cast<Eigen::Index>(P));
  for (std::size_t p = 0; p < P; ++p) w[static_cast<Eigen::Index>(p)] = rep.pair_weights[p].second;
  const Eigen::VectorXd exact = G * w;
  rep.exact_gradient.assign(exact.data(), exact.data() + exact.size());
  rep.exact_loss = 0;
  for (std::size_t p = 0; p < P; ++p) rep.exact_loss += w[static_cast<Eigen::Index>(p)] * pair_loss[p];

  // Exhaustive enumeration of K-slot minibatches (each slot independently
  // one of the P outcomes), weighting the estimator by its probability.
  const double space = std::pow(static_cast<double>(P), K);
  if (space <= 1e6) {
    Eigen::VectorXd expected = Eigen::VectorXd::Zero(exact.size());
    double expected_loss = 0;
    std::vector<std::size_t> idx(static_cast<std::size_t>(K), 0);
    const long total = static_cast<long>(space);
    for (long t = 0; t < total; ++t) {
      long rem = t;
      double prob = 1;
      Eigen::VectorXd c = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(P));
      for (int k = 0; k < K; ++k) {
        idx[static_cast<std::size_t>(k)] = static_cast<std::size_t>(rem % static_cast<long>(P));
        rem /= static_cast<long>(P);
        prob *= rep.pair_weights[idx[static_cast<std::size_t>(k)]].second;
        c[static_cast<Eigen::Index>(idx[static_cast<std::size_t>(k)])] += 1.0 / K;
      }
      expected += prob * (G * c);
      for (std::size_t p = 0; p < P; ++p) expected_loss += prob * c[static_cast<Eigen::Index>(p)] * pair_loss[p];
    }
    rep.enumerated_minibatches = total;
    rep.enumeration_max_error = (expected - exact).cwiseAbs().maxCoeff();
    rep.enumerated_loss = expected_loss;
  } else {
    rep.enumeration_max_error = std::nan("");
  }

  // Monte-Carlo with the real sampler. The estimator of one draw is G * c
  // with c the slot-count vector / K, so its mean and per-component variance
  // follow from the first two moments of c.
  std::map<SlotIndex, std::size_t> pos;
  for (std::size_t p = 0; p < P; ++p) pos[rep.pair_weights[p].first] = p;
  std::mt19937_64 rng(seed);
  Eigen::VectorXd sum_c = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(P));
  Eigen::MatrixXd sum_cc = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(P), static_cast<Eigen::Index>(P));
  for (long d = 0; d < draws; ++d) {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(P));
    for (const auto& s : sample_minibatch<std::mt19937_64>(counts, K, rng))
      c[static_cast<Eigen::Index>(pos.at(s))] += 1.0 / K;
    sum_c += c;
    sum_cc += c * c.transpose();
  }
  rep.draws = draws;
  rep.components = D;
  if (draws > 1) {
    const double n = static_cast<double>(draws);
    const Eigen::VectorXd mean_c = sum_c / n;
    const Eigen::MatrixXd cov_c = (sum_cc - n * mean_c * mean_c.transpose()) / (n - 1);
    const Eigen::VectorXd mc_mean = G * mean_c;
    const Eigen::VectorXd var = ((G * cov_c).cwiseProduct(G)).rowwise().sum();
    std::size_t varying = 0, within = 0;
    for (Eigen::Index i = 0; i < mc_mean.size(); ++i) {
      const double scale = std::max(std::abs(exact[i]), G.row(i).cwiseAbs().maxCoeff());
      if (var[i] <= 1e-24 * scale * scale) continue;
      ++varying;
      const double se = std::sqrt(var[i] / n);
      if (std::abs(mc_mean[i] - exact[i]) <= 3 * se) ++within;
    }
    rep.varying_components = varying;
    rep.fraction_within_3se = varying ? static_cast<double>(within) / static_cast<double>(varying) : 1.0;
  }
  return rep;
}

}  // namespace weakreg

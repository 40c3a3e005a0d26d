// weakreg: synthetic corpora, training, inference and evaluation.

#include "CLI11.hpp"
#include "weakreg/config.hpp"
#include "weakreg/evaluation.hpp"
#include "weakreg/phantom.hpp"
#include "weakreg/trainer.hpp"
#include "weakreg/volume_io.hpp"

#include <malloc.h>

#include <chrono>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace weakreg;
using nlohmann::json;

namespace {

int cmd_synth(const fs::path& spec_path, const fs::path& out, int n_train, int n_heldout) {
  PhantomSpec spec;
  if (!spec_path.empty()) spec = read_json(spec_path).get<PhantomSpec>();
  const auto corpus = synth_corpus(spec, n_train, n_heldout);
  const auto manifest = write_corpus(corpus, out);
  std::cout << "wrote " << corpus.train.size() << " training and " << corpus.heldout.size()
            << " held-out cases to " << manifest.string() << '\n';
  return 0;
}

int cmd_train(const fs::path& cfg_path, const fs::path& manifest, const fs::path& out, const fs::path& resume,
              bool quiet) {
  const TrainingCorpus corpus = to_training_corpus(read_corpus(manifest, Split::train));
  std::unique_ptr<Trainer> trainer;
  if (!resume.empty()) {
    trainer = std::make_unique<Trainer>(corpus, load_checkpoint(resume));
  } else {
    const RunConfig rc = parse_run_config(cfg_path.empty() ? json::object() : read_json(cfg_path));
    trainer = std::make_unique<Trainer>(corpus, rc.network, rc.training);
    write_json(to_json(rc), out / "config.json");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const long every = std::max<long>(1, trainer->checkpoint().training.iterations / 20);
  trainer->run(out, [&](const IterationRecord& r) {
    if (quiet || (r.iteration + 1) % every != 0) return;
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "iter " << r.iteration + 1 << "  sim " << r.similarity << "  reg " << r.regularizer << "  total "
              << r.total << "  (" << s << " s)\n";
  });
  std::cout << "checkpoint: " << (out / "checkpoint").string() << '\n';
  return 0;
}

Registrator make_registrator(const fs::path& ckpt, const fs::path& global, NormStats stats) {
  if (global.empty()) return Registrator(load_checkpoint(ckpt), stats);
  return Registrator(load_checkpoint(global), load_checkpoint(ckpt), stats);
}

int cmd_register(const fs::path& ckpt, const fs::path& global, NormStats stats, const fs::path& moving_path,
                 const fs::path& fixed_path, const fs::path& out, const fs::path& warped_out) {
  const Registrator reg = make_registrator(ckpt, global, stats);
  const Volume moving = read_volume(moving_path);
  const DisplacementField u = reg(moving, read_volume(fixed_path));
  write_volume(u, out);
  if (!warped_out.empty()) write_volume(warp(moving, u), warped_out);
  return 0;
}

int cmd_warp(const fs::path& input, const fs::path& ddf_path, const fs::path& out) {
  const DisplacementField u = read_ddf(ddf_path);
  const AnyVolume v = read_any(input);
  std::visit([&](const auto& x) { write_volume(AnyVolume(warp(x, u)), out); }, v);
  return 0;
}

int cmd_evaluate(const fs::path& ckpt, const fs::path& global, NormStats stats, bool ground_truth, const fs::path& manifest,
                 const std::string& split, const fs::path& report, const fs::path& maps) {
  const auto cases = read_corpus(manifest, parse_split(split));
  DdfPredictor predict;
  json source;
  if (ground_truth) {
    predict = [](const PhantomCase& c) {
      if (c.ground_truth.data.empty()) throw std::runtime_error(c.id + " has no ground-truth field");
      return c.ground_truth;
    };
    source = "ground_truth";
  } else {
    auto reg = std::make_shared<Registrator>(make_registrator(ckpt, global, stats));
    predict = [reg](const PhantomCase& c) { return (*reg)(c.moving, c.fixed); };
    source = {{"checkpoint", ckpt.string()}, {"global", global.string()}, {"bn_statistics", to_string(stats)}};
  }
  EvalReport r = evaluate(cases, predict, maps);
  r.metadata["source"] = source;
  r.metadata["split"] = split;
  write_json(to_json(r), report);
  fs::path csv = report;
  csv.replace_extension(".csv");
  std::ofstream out(csv);
  write_percentile_csv(r, out);
  std::cout << "median TRE " << r.tre.median << " mm (initial " << r.initial_tre.median << "), median DSC "
            << r.dsc.median << " (initial " << r.initial_dsc.median << "), negative-Jacobian voxels "
            << r.negative_jacobian_voxels << '\n';
  return 0;
}

int cmd_inspect(const fs::path& ddf_path, const fs::path& out) {
  const DisplacementField u = read_ddf(ddf_path);
  const Volume J = jacobian_determinant_map(u), D = displacement_magnitude_map(u), G = gradient_l2norm_map(u);
  write_volume(J, out / "jacobian");
  write_volume(D, out / "magnitude");
  write_volume(G, out / "gradient_norm");
  const auto stats = [](const Volume& v) {
    const Eigen::VectorXd x = v.vec().cast<double>();
    return json{{"min", x.minCoeff()}, {"max", x.maxCoeff()}, {"mean", x.mean()},
                {"std", std::sqrt((x.array() - x.mean()).square().mean())}};
  };
  const long negative = (J.vec().array() < 0).count();
  write_json(json{{"jacobian", stats(J)}, {"magnitude", stats(D)}, {"gradient_norm", stats(G)},
                  {"negative_jacobian_voxels", negative}},
             out / "summary.json");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Training allocates and frees many large buffers per iteration.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"Weakly-supervised deformable registration"};
  app.require_subcommand(1);

  fs::path spec, out, cfg, corpus, resume, ckpt, global, moving, fixed, warped, input, ddf, report, maps;
  int n_train = 20, n_heldout = 6;
  bool quiet = false, ground_truth = false;
  std::string split = "heldout", bn_stats = "per_pair";

  auto* synth = app.add_subcommand("synth", "Generate a synthetic phantom corpus");
  synth->add_option("--spec", spec, "Phantom spec JSON (defaults when omitted)")->check(CLI::ExistingFile);
  synth->add_option("--out", out, "Output directory")->required();
  synth->add_option("--train", n_train, "Training cases")->check(CLI::NonNegativeNumber);
  synth->add_option("--heldout", n_heldout, "Held-out cases")->check(CLI::NonNegativeNumber);

  auto* train = app.add_subcommand("train", "Train a registration network");
  train->add_option("--config", cfg, "Run config JSON")->check(CLI::ExistingFile);
  train->add_option("--corpus", corpus, "Corpus manifest")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--resume", resume, "Checkpoint to resume from");
  train->add_flag("--quiet", quiet);

  auto* reg = app.add_subcommand("register", "Predict a DDF for an image pair");
  reg->add_option("--checkpoint", ckpt, "Checkpoint (ddf or affine head)")->required();
  reg->add_option("--global", global, "Affine-head checkpoint applied before --checkpoint");
  reg->add_option("--bn-stats", bn_stats, "Batch-norm statistics: per_pair or running")
      ->check(CLI::IsMember({"per_pair", "running"}));
  reg->add_option("--moving", moving)->required()->check(CLI::ExistingPath);
  reg->add_option("--fixed", fixed)->required()->check(CLI::ExistingPath);
  reg->add_option("--out", out, "Output DDF")->required();
  reg->add_option("--warped", warped, "Also write the warped moving image");

  auto* wp = app.add_subcommand("warp", "Apply a DDF to a volume, label or DDF");
  wp->add_option("--input", input)->required();
  wp->add_option("--ddf", ddf)->required();
  wp->add_option("--out", out)->required();

  auto* ev = app.add_subcommand("evaluate", "TRE/DSC report on a corpus split");
  auto* ev_ckpt = ev->add_option("--checkpoint", ckpt, "Checkpoint (ddf or affine head)");
  ev->add_option("--global", global, "Affine-head checkpoint applied before --checkpoint");
  ev->add_option("--bn-stats", bn_stats, "Batch-norm statistics: per_pair or running")
      ->check(CLI::IsMember({"per_pair", "running"}));
  auto* ev_gt = ev->add_flag("--ground-truth", ground_truth, "Use the stored ground-truth DDFs");
  ev_ckpt->excludes(ev_gt);
  ev->add_option("--corpus", corpus)->required()->check(CLI::ExistingFile);
  ev->add_option("--split", split, "train, heldout or all")->check(CLI::IsMember({"train", "heldout", "all"}));
  ev->add_option("--report", report, "Report JSON (percentiles also as .csv)")->required();
  ev->add_option("--maps", maps, "Directory for per-case maps");

  auto* insp = app.add_subcommand("inspect", "Jacobian, magnitude and gradient-norm maps of a DDF");
  insp->add_option("--ddf", ddf)->required();
  insp->add_option("--out", out)->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) return cmd_synth(spec, out, n_train, n_heldout);
    if (*train) return cmd_train(cfg, corpus, out, resume, quiet);
    if (*reg) return cmd_register(ckpt, global, parse_norm_stats(bn_stats), moving, fixed, out, warped);
    if (*wp) return cmd_warp(input, ddf, out);
    if (*ev) {
      if (!ground_truth && ckpt.empty()) throw std::invalid_argument("evaluate needs --checkpoint or --ground-truth");
      return cmd_evaluate(ckpt, global, parse_norm_stats(bn_stats), ground_truth, corpus, split, report, maps);
    }
    if (*insp) return cmd_inspect(ddf, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

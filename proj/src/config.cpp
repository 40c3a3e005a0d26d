#include "weakreg/config.hpp"

#include <fstream>
#include <set>

namespace weakreg {

using nlohmann::json;

namespace {

void require_object(const json& j, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
}

void reject_unknown(const json& j, const std::set<std::string>& allowed, const char* what) {
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError(std::string("unknown key '") + k + "' in " + what);
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

SimilarityKind parse_similarity(const std::string& s) {
  if (s == "multiscale_dice") return SimilarityKind::dice;
  if (s == "multiscale_cross_entropy") return SimilarityKind::cross_entropy;
  throw ConfigError("similarity must be multiscale_dice or multiscale_cross_entropy, got " + s);
}

RegularizerKind parse_regularizer(const std::string& s) {
  if (s == "bending") return RegularizerKind::bending;
  if (s == "l2_gradient") return RegularizerKind::l2_gradient;
  throw ConfigError("regularizer must be bending or l2_gradient, got " + s);
}

HeadKind parse_head(const std::string& s) {
  if (s == "ddf") return HeadKind::ddf;
  if (s == "affine") return HeadKind::affine;
  throw ConfigError("head must be ddf or affine, got " + s);
}

}  // namespace

std::string to_string(SimilarityKind k) {
  return k == SimilarityKind::dice ? "multiscale_dice" : "multiscale_cross_entropy";
}
std::string to_string(RegularizerKind k) { return k == RegularizerKind::bending ? "bending" : "l2_gradient"; }
std::string to_string(HeadKind k) { return k == HeadKind::ddf ? "ddf" : "affine"; }

void to_json(json& j, const NetworkConfig& c) {
  j = json{{"n0", c.n0},
           {"summand_levels", std::vector<int>(c.summand_levels.begin(), c.summand_levels.end())},
           {"head", to_string(c.head)},
           {"bn_epsilon", c.bn_epsilon},
           {"bn_momentum", c.bn_momentum}};
}

void from_json(const json& j, NetworkConfig& c) {
  require_object(j, "network config");
  reject_unknown(j, {"n0", "summand_levels", "head", "bn_epsilon", "bn_momentum"}, "network config");
  read_opt(j, "n0", c.n0);
  if (j.contains("summand_levels")) {
    std::vector<int> levels;
    read_opt(j, "summand_levels", levels);
    c.summand_levels = std::set<int>(levels.begin(), levels.end());
  }
  if (j.contains("head")) c.head = parse_head(j.at("head").get<std::string>());
  read_opt(j, "bn_epsilon", c.bn_epsilon);
  read_opt(j, "bn_momentum", c.bn_momentum);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

void to_json(json& j, const AugmentationConfig& c) {
  j = json{{"enabled", c.enabled},
           {"max_rotation_deg", c.max_rotation_deg},
           {"max_log_scale", c.max_log_scale},
           {"max_shear", c.max_shear},
           {"max_translation_frac", c.max_translation_frac}};
}

void from_json(const json& j, AugmentationConfig& c) {
  require_object(j, "augmentation");
  reject_unknown(j, {"enabled", "max_rotation_deg", "max_log_scale", "max_shear", "max_translation_frac"},
                 "augmentation");
  read_opt(j, "enabled", c.enabled);
  read_opt(j, "max_rotation_deg", c.max_rotation_deg);
  read_opt(j, "max_log_scale", c.max_log_scale);
  read_opt(j, "max_shear", c.max_shear);
  read_opt(j, "max_translation_frac", c.max_translation_frac);
}

void to_json(json& j, const MultiscaleConfig& c) { j = json{{"sigmas_mm", c.sigmas}, {"truncation", c.truncation}}; }

void from_json(const json& j, MultiscaleConfig& c) {
  require_object(j, "multiscale");
  reject_unknown(j, {"sigmas_mm", "truncation"}, "multiscale");
  read_opt(j, "sigmas_mm", c.sigmas);
  read_opt(j, "truncation", c.truncation);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"alpha", c.alpha},
           {"similarity", to_string(c.similarity)},
           {"regularizer", to_string(c.regularizer)},
           {"iterations", c.iterations},
           {"seed", c.seed},
           {"augmentation", c.augmentation},
           {"prefilter", c.prefilter},
           {"multiscale", c.multiscale},
           {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}}},
           {"checkpoint_interval", c.checkpoint_interval},
           {"threads", c.threads}};
}

void from_json(const json& j, TrainConfig& c) {
  require_object(j, "training config");
  reject_unknown(j,
                 {"batch_size", "learning_rate", "alpha", "similarity", "regularizer", "iterations", "seed",
                  "augmentation", "prefilter", "multiscale", "adam", "checkpoint_interval", "threads"},
                 "training config");
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "alpha", c.alpha);
  if (j.contains("similarity")) c.similarity = parse_similarity(j.at("similarity").get<std::string>());
  if (j.contains("regularizer")) c.regularizer = parse_regularizer(j.at("regularizer").get<std::string>());
  read_opt(j, "iterations", c.iterations);
  read_opt(j, "seed", c.seed);
  if (j.contains("augmentation")) from_json(j.at("augmentation"), c.augmentation);
  read_opt(j, "prefilter", c.prefilter);
  if (j.contains("multiscale")) from_json(j.at("multiscale"), c.multiscale);
  if (j.contains("adam")) {
    const json& a = j.at("adam");
    require_object(a, "adam");
    reject_unknown(a, {"beta1", "beta2", "epsilon"}, "adam");
    read_opt(a, "beta1", c.adam.beta1);
    read_opt(a, "beta2", c.adam.beta2);
    read_opt(a, "epsilon", c.adam.epsilon);
  }
  read_opt(j, "checkpoint_interval", c.checkpoint_interval);
  read_opt(j, "threads", c.threads);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

RunConfig parse_run_config(const json& j) {
  require_object(j, "run config");
  reject_unknown(j, {"network", "training"}, "run config");
  RunConfig rc;
  if (j.contains("network")) from_json(j.at("network"), rc.network);
  rc.network.validate();
  json t = j.value("training", json::object());
  if (!t.contains("learning_rate"))
    t["learning_rate"] = rc.network.head == HeadKind::affine ? kAffineLearningRate : kDefaultLearningRate;
  from_json(t, rc.training);
  return rc;
}

json to_json(const RunConfig& c) { return json{{"network", c.network}, {"training", c.training}}; }

json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void write_json(const json& j, const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw ConfigError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

}  // namespace weakreg

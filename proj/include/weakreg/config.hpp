#ifndef WEAKREG_CONFIG_HPP_
#define WEAKREG_CONFIG_HPP_

#include "json.hpp"
#include "weakreg/network.hpp"
#include "weakreg/training.hpp"

#include <filesystem>
#include <stdexcept>

namespace weakreg {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);
void to_json(nlohmann::json& j, const AugmentationConfig& c);
void from_json(const nlohmann::json& j, AugmentationConfig& c);
void to_json(nlohmann::json& j, const MultiscaleConfig& c);
void from_json(const nlohmann::json& j, MultiscaleConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

std::string to_string(SimilarityKind k);
std::string to_string(RegularizerKind k);
std::string to_string(HeadKind k);

/// A training run: {"network": {...}, "training": {...}}. Missing fields
/// take their defaults; the learning rate defaults to 1e-6 for the affine
/// head and 1e-5 otherwise. Unknown keys are rejected.
struct RunConfig {
  NetworkConfig network;
  TrainConfig training;
};

RunConfig parse_run_config(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);
nlohmann::json read_json(const std::filesystem::path& p);
void write_json(const nlohmann::json& j, const std::filesystem::path& p);

}  // namespace weakreg

#endif  // WEAKREG_CONFIG_HPP_

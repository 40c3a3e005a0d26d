#ifndef WEAKREG_CHECKPOINT_HPP_
#define WEAKREG_CHECKPOINT_HPP_

#include "weakreg/network.hpp"
#include "weakreg/training.hpp"

#include <filesystem>
#include <stdexcept>

namespace weakreg {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Network configuration, training configuration, iteration count and every
/// parameter tensor (values, Adam moments, running statistics).
struct Checkpoint {
  NetworkConfig network;
  TrainConfig training;
  long iteration = 0;
  ParameterStore<float> store;
};

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (raw little-endian f32
/// payload). A trailing .json or .bin on `path` is ignored.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Checkpoint of a freshly initialised network.
Checkpoint initial_checkpoint(const NetworkConfig& net, const TrainConfig& train);

}  // namespace weakreg

#endif  // WEAKREG_CHECKPOINT_HPP_

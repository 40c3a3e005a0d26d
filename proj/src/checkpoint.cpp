#include "weakreg/checkpoint.hpp"

#include "weakreg/config.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

namespace weakreg {

using nlohmann::json;

namespace {

std::filesystem::path stem_of(std::filesystem::path p) {
  if (p.extension() == ".json" || p.extension() == ".bin") p.replace_extension();
  return p;
}

void put_f32(std::vector<unsigned char>& buf, float v) {
  const auto u = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) buf.push_back(static_cast<unsigned char>((u >> (8 * b)) & 0xffu));
}

float get_f32(const std::vector<unsigned char>& buf, std::size_t at) {
  std::uint32_t u = 0;
  for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(buf[at + static_cast<std::size_t>(b)]) << (8 * b);
  return std::bit_cast<float>(u);
}

const char* role_name(ParamRole r) {
  switch (r) {
    case ParamRole::conv_weight: return "conv_weight";
    case ParamRole::deconv_weight: return "deconv_weight";
    case ParamRole::deconv_bias: return "deconv_bias";
    case ParamRole::bn_gamma: return "bn_gamma";
    case ParamRole::bn_beta: return "bn_beta";
    case ParamRole::bn_running_mean: return "bn_running_mean";
    case ParamRole::bn_running_var: return "bn_running_var";
    case ParamRole::head_weight: return "head_weight";
    case ParamRole::head_bias: return "head_bias";
    case ParamRole::fc_weight: return "fc_weight";
    case ParamRole::fc_bias: return "fc_bias";
  }
  return "unknown";
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto stem = stem_of(path);
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  std::vector<unsigned char> payload;
  json tensors = json::array();
  for (const auto& p : ckpt.store.params) {
    json t{{"name", p.name}, {"role", role_name(p.role)}, {"rows", p.value.rows()}, {"cols", p.value.cols()}};
    const std::pair<const char*, const MatrixX<float>*> parts[] = {
        {"value", &p.value}, {"adam_m", &p.adam_m}, {"adam_v", &p.adam_v}};
    for (const auto& [key, m] : parts) {
      t[std::string(key) + "_offset"] = payload.size();
      for (Eigen::Index i = 0; i < m->size(); ++i) put_f32(payload, m->data()[i]);
    }
    tensors.push_back(std::move(t));
  }
  json manifest{{"format", "weakreg-checkpoint"},
                {"version", 1},
                {"iteration", ckpt.iteration},
                {"network", ckpt.network},
                {"training", ckpt.training},
                {"dtype", "f32le"},
                {"payload", stem.filename().string() + ".bin"},
                {"payload_bytes", payload.size()},
                {"tensors", tensors}};
  {
    std::ofstream out(stem.string() + ".bin", std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + stem.string() + ".bin");
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  }
  std::ofstream out(stem.string() + ".json", std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + stem.string() + ".json");
  out << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto stem = stem_of(path);
  json m;
  try {
    m = read_json(stem.string() + ".json");
  } catch (const ConfigError& e) {
    throw CheckpointError(e.what());
  }
  if (m.value("format", "") != "weakreg-checkpoint") throw CheckpointError(stem.string() + ": not a checkpoint");
  if (m.value("dtype", "") != "f32le") throw CheckpointError(stem.string() + ": unsupported dtype");

  std::ifstream in(stem.string() + ".bin", std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + stem.string() + ".bin");
  std::vector<unsigned char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (payload.size() != m.at("payload_bytes").get<std::size_t>())
    throw CheckpointError(stem.string() + ": payload size mismatch");

  Checkpoint c;
  c.network = m.at("network").get<NetworkConfig>();
  c.training = m.at("training").get<TrainConfig>();
  c.iteration = m.at("iteration").get<long>();
  c.store = init_parameters<float>(c.network, c.training.seed);
  const json& tensors = m.at("tensors");
  if (tensors.size() != c.store.size()) throw CheckpointError(stem.string() + ": tensor count mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const json& t = tensors[i];
    auto& p = c.store.params[i];
    if (t.at("name").get<std::string>() != p.name || t.at("rows").get<Eigen::Index>() != p.value.rows() ||
        t.at("cols").get<Eigen::Index>() != p.value.cols())
      throw CheckpointError(stem.string() + ": tensor layout mismatch at " + p.name);
    const std::pair<const char*, MatrixX<float>*> parts[] = {
        {"value", &p.value}, {"adam_m", &p.adam_m}, {"adam_v", &p.adam_v}};
    for (const auto& [key, mat] : parts) {
      const auto off = t.at(std::string(key) + "_offset").get<std::size_t>();
      if (off + 4 * static_cast<std::size_t>(mat->size()) > payload.size())
        throw CheckpointError(stem.string() + ": tensor " + p.name + " exceeds payload");
      for (Eigen::Index e = 0; e < mat->size(); ++e) mat->data()[e] = get_f32(payload, off + 4 * static_cast<std::size_t>(e));
    }
    p.grad.setZero();
  }
  return c;
}

Checkpoint initial_checkpoint(const NetworkConfig& net, const TrainConfig& train) {
  Checkpoint c;
  c.network = net;
  c.training = train;
  c.iteration = 0;
  c.store = init_parameters<float>(net, train.seed);
  return c;
}

}  // namespace weakreg

#include "weakreg/volume_io.hpp"

#include "json.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace weakreg {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

fs::path header_path(const fs::path& stem) { return fs::path(stem.string() + ".json"); }
fs::path payload_path(const fs::path& stem) { return fs::path(stem.string() + ".raw"); }

void write_payload(const fs::path& path, const std::vector<float>& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(IoErrc::missing_file, "cannot open " + path.string() + " for writing");
  std::vector<char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(IoErrc::missing_file, "write failed: " + path.string());
}

std::vector<float> read_payload(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrc::missing_file, "missing payload " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0)
    throw IoError(IoErrc::size_mismatch, "payload size is not a multiple of 4 bytes: " + path.string());
  std::vector<float> values(bytes.size() / 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
    values[i] = std::bit_cast<float>(bits);
  }
  return values;
}

void write_header(const fs::path& stem, const GridMeta& meta, int channels, const char* kind) {
  json h;
  h["dims"] = {meta.dims[0], meta.dims[1], meta.dims[2]};
  h["spacing_mm"] = {meta.spacing.x(), meta.spacing.y(), meta.spacing.z()};
  h["channels"] = channels;
  h["dtype"] = "f32le";
  h["kind"] = kind;
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  std::ofstream out(header_path(stem));
  if (!out) throw IoError(IoErrc::missing_file, "cannot write header for " + stem.string());
  out << h.dump(2) << '\n';
}

struct Header {
  GridMeta meta;
  int channels = 1;
  std::string kind;
};

Header read_header(const fs::path& stem) {
  std::ifstream in(header_path(stem));
  if (!in) throw IoError(IoErrc::missing_file, "missing header " + header_path(stem).string());
  Header h;
  try {
    json j = json::parse(in);
    auto dims = j.at("dims").get<std::vector<int>>();
    auto sp = j.at("spacing_mm").get<std::vector<double>>();
    if (dims.size() != 3 || sp.size() != 3)
      throw IoError(IoErrc::malformed_header, "dims and spacing_mm must have 3 entries");
    const auto dtype = j.at("dtype").get<std::string>();
    if (dtype != "f32le") throw IoError(IoErrc::unknown_dtype, "unknown dtype '" + dtype + "'");
    h.channels = j.at("channels").get<int>();
    h.kind = j.value("kind", std::string{});
    h.meta = GridMeta({dims[0], dims[1], dims[2]}, Eigen::Vector3d(sp[0], sp[1], sp[2]));
    h.meta.validate();
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(IoErrc::malformed_header, std::string("malformed header: ") + e.what());
  }
  if (h.channels != 1 && h.channels != 3)
    throw IoError(IoErrc::bad_channels, "channels must be 1 or 3");
  return h;
}

}  // namespace

fs::path volume_stem(const fs::path& p) {
  const auto ext = p.extension();
  if (ext == ".json" || ext == ".raw") {
    fs::path q = p;
    q.replace_extension();
    return q;
  }
  return p;
}

void write_volume(const Volume& v, const fs::path& path) {
  const auto stem = volume_stem(path);
  write_header(stem, v.meta, 1, "intensity");
  write_payload(payload_path(stem), v.data);
}

void write_volume(const LabelMask& l, const fs::path& path) {
  const auto stem = volume_stem(path);
  write_header(stem, l.meta, 1, "label");
  write_payload(payload_path(stem), l.data);
}

void write_volume(const DisplacementField& u, const fs::path& path) {
  const auto stem = volume_stem(path);
  write_header(stem, u.meta, 3, "displacement");
  write_payload(payload_path(stem), u.data);
}

void write_volume(const AnyVolume& value, const fs::path& path) {
  std::visit([&](const auto& v) { write_volume(v, path); }, value);
}

AnyVolume read_any(const fs::path& path) {
  const auto stem = volume_stem(path);
  const Header h = read_header(stem);
  auto values = read_payload(payload_path(stem));
  const std::size_t expected = h.meta.voxel_count() * static_cast<std::size_t>(h.channels);
  if (values.size() != expected) {
    std::ostringstream os;
    os << "payload has " << values.size() << " values, header implies " << expected;
    throw IoError(IoErrc::size_mismatch, os.str());
  }
  if (h.channels == 3) {
    if (!all_finite(values)) throw IoError(IoErrc::non_finite, "non-finite displacement value");
    return DisplacementField(h.meta, std::move(values));
  }
  if (h.kind == "label") {
    for (float x : values) {
      if (!std::isfinite(x)) throw IoError(IoErrc::non_finite, "non-finite label value");
      if (x < 0.0f || x > 1.0f) throw IoError(IoErrc::label_out_of_range, "label value outside [0,1]");
    }
    return LabelMask(h.meta, std::move(values));
  }
  if (!all_finite(values)) throw IoError(IoErrc::non_finite, "non-finite intensity value");
  return Volume(h.meta, std::move(values));
}

Volume read_volume(const fs::path& path) {
  auto any = read_any(path);
  if (auto* v = std::get_if<Volume>(&any)) return std::move(*v);
  if (auto* l = std::get_if<LabelMask>(&any)) return retag<VolumeTag>(std::move(*l));
  throw IoError(IoErrc::wrong_kind, "expected a single-channel volume: " + path.string());
}

LabelMask read_label(const fs::path& path) {
  auto any = read_any(path);
  if (auto* l = std::get_if<LabelMask>(&any)) return std::move(*l);
  if (auto* v = std::get_if<Volume>(&any)) {
    for (float x : v->data)
      if (x < 0.0f || x > 1.0f) throw IoError(IoErrc::label_out_of_range, "label value outside [0,1]");
    return retag<LabelTag>(std::move(*v));
  }
  throw IoError(IoErrc::wrong_kind, "expected a label mask: " + path.string());
}

DisplacementField read_ddf(const fs::path& path) {
  auto any = read_any(path);
  if (auto* u = std::get_if<DisplacementField>(&any)) return std::move(*u);
  throw IoError(IoErrc::wrong_kind, "expected a 3-channel displacement field: " + path.string());
}

}  // namespace weakreg

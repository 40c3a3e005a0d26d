#ifndef WEAKREG_VOLUME_IO_HPP_
#define WEAKREG_VOLUME_IO_HPP_

#include "weakreg/grid.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <variant>

namespace weakreg {

enum class IoErrc {
  missing_file,
  malformed_header,
  size_mismatch,
  unknown_dtype,
  bad_channels,
  non_finite,
  label_out_of_range,
  wrong_kind,
};

class IoError : public std::runtime_error {
 public:
  IoError(IoErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  IoErrc code() const noexcept { return code_; }

 private:
  IoErrc code_;
};

using AnyVolume = std::variant<Volume, LabelMask, DisplacementField>;

/// Strips a trailing ".json" or ".raw" so either file (or the bare stem) can
/// name a volume on disk.
std::filesystem::path volume_stem(const std::filesystem::path& p);

void write_volume(const Volume& v, const std::filesystem::path& path);
void write_volume(const LabelMask& l, const std::filesystem::path& path);
void write_volume(const DisplacementField& u, const std::filesystem::path& path);
void write_volume(const AnyVolume& value, const std::filesystem::path& path);

/// Single-channel payloads are returned as LabelMask when the header says
/// "kind": "label", otherwise as Volume; three-channel payloads as
/// DisplacementField.
AnyVolume read_any(const std::filesystem::path& path);

Volume read_volume(const std::filesystem::path& path);
/// Accepts any single-channel payload whose values all lie in [0, 1].
LabelMask read_label(const std::filesystem::path& path);
DisplacementField read_ddf(const std::filesystem::path& path);

}  // namespace weakreg

#endif  // WEAKREG_VOLUME_IO_HPP_

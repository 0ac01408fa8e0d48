// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include "badclip/harness/config.hpp"
#include "badclip/io/container.hpp"

namespace badclip::harness {

class CheckpointError : public io::FormatError {
 public:
  using io::FormatError::FormatError;
};

/// An artifact the checkpoint layer can persist: kind() tag plus
/// store(bundle) / restore(bundle, allow_conversion).
template <typename A>
concept Checkpointable = requires(const A a, io::ArrayBundle& b, const io::ArrayBundle& cb) {
  { A::kind() } -> std::convertible_to<std::string>;
  a.store(b);
  { A::restore(cb, false) } -> std::same_as<A>;
};

/// Writes one or more artifacts of scalar type T into a single container.
template <typename T, Checkpointable... A>
void save_checkpoint(const std::filesystem::path& path, const A&... artifacts) {
  io::ArrayBundle bundle(io::precision_of<T>());
  bundle.meta()["software_version"] = kSoftwareVersion;
  bundle.meta()["artifacts"] = json::array({A::kind()...});
  (artifacts.store(bundle), ...);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  bundle.save(path);
}

/// Opens a checkpoint, verifying container version and checksums. Throws
/// PrecisionMismatch when the stored precision differs from T unless
/// `allow_conversion` is set.
template <typename T>
io::ArrayBundle open_checkpoint(const std::filesystem::path& path, bool allow_conversion = false) {
  auto bundle = io::ArrayBundle::load(path);
  if (!bundle.meta().contains("software_version")) {
    throw CheckpointError("'" + path.string() + "' carries no software version");
  }
  if (bundle.precision() != io::precision_of<T>() && !allow_conversion) {
    throw io::PrecisionMismatch("'" + path.string() + "' stores " +
                                io::precision_name(bundle.precision()) + " values, requested " +
                                io::precision_name(io::precision_of<T>()));
  }
  return bundle;
}

template <Checkpointable A>
A restore_artifact(const io::ArrayBundle& bundle, bool allow_conversion = false) {
  const auto kinds = bundle.meta().at("artifacts").get<std::vector<std::string>>();
  if (std::find(kinds.begin(), kinds.end(), A::kind()) == kinds.end()) {
    throw CheckpointError(std::string("checkpoint holds no '") + A::kind() + "' artifact");
  }
  return A::restore(bundle, allow_conversion);
}

template <typename T, Checkpointable A>
A load_checkpoint(const std::filesystem::path& path, bool allow_conversion = false) {
  return restore_artifact<A>(open_checkpoint<T>(path, allow_conversion), allow_conversion);
}

}  // namespace badclip::harness

// SPDX-License-Identifier: Apache-2.0
#pragma once

// Self-describing array container shared by checkpoints, triggers and
// feature dumps:
//
//   "BCLPARR1"                magic, 8 bytes
//   u64 header_len            little-endian
//   header                    JSON, header_len bytes
//   u32 header_crc            CRC-32 of the header bytes
//   payload                   arrays back to back, little-endian IEEE-754
//
// The header lists every array with its shape, byte offset into the payload
// and CRC-32, plus the element precision and free-form metadata.

#include <bit>
#include <boost/crc.hpp>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "badclip/numerics/tensor.hpp"
#include "json.hpp"

namespace badclip::io {

using json = nlohmann::json;

inline constexpr char kMagic[8] = {'B', 'C', 'L', 'P', 'A', 'R', 'R', '1'};
inline constexpr int kFormatVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};
class PrecisionMismatch : public FormatError {
 public:
  using FormatError::FormatError;
};

static_assert(std::endian::native == std::endian::little,
              "array files are written in host order; big-endian hosts need "
              "byte swapping");

inline std::uint32_t crc32(std::span<const std::byte> bytes) {
  boost::crc_32_type crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

inline std::uint32_t crc32(std::string_view s) {
  return crc32(std::as_bytes(std::span(s.data(), s.size())));
}

enum class Precision { kF32, kF64 };

inline const char* precision_name(Precision p) {
  return p == Precision::kF32 ? "f32" : "f64";
}

template <typename T>
constexpr Precision precision_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? Precision::kF32 : Precision::kF64;
}

/// Named arrays plus metadata, stored at one precision.
class ArrayBundle {
 public:
  explicit ArrayBundle(Precision precision = Precision::kF32)
      : precision_(precision) {}

  Precision precision() const { return precision_; }
  json& meta() { return meta_; }
  const json& meta() const { return meta_; }

  template <typename T>
  void put(const std::string& name, const nx::Tensor<T>& t) {
    put(name, t.shape(), t.data());
  }

  template <typename T>
  void put(const std::string& name, const nx::Shape& shape,
           std::span<const T> values) {
    Entry e;
    e.shape = shape;
    if (precision_ == Precision::kF32) {
      std::vector<float> v(values.begin(), values.end());
      e.bytes.resize(v.size() * sizeof(float));
      std::memcpy(e.bytes.data(), v.data(), e.bytes.size());
    } else {
      std::vector<double> v(values.begin(), values.end());
      e.bytes.resize(v.size() * sizeof(double));
      std::memcpy(e.bytes.data(), v.data(), e.bytes.size());
    }
    entries_[name] = std::move(e);
  }

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : entries_) out.push_back(k);
    return out;
  }

  /// Reads an array at precision T. A bundle stored at another precision is
  /// refused unless `allow_conversion` is set.
  template <typename T>
  nx::Tensor<T> get(const std::string& name, bool allow_conversion = false) const {
    const auto it = entries_.find(name);
    if (it == entries_.end()) throw FormatError("array '" + name + "' not found");
    if (precision_of<T>() != precision_ && !allow_conversion) {
      throw PrecisionMismatch(std::string("array '") + name + "' stored as " +
                              precision_name(precision_) + ", requested " +
                              precision_name(precision_of<T>()));
    }
    const auto& e = it->second;
    const auto n = nx::numel_of(e.shape);
    std::vector<T> out(n);
    if (precision_ == Precision::kF32) {
      std::vector<float> v(n);
      std::memcpy(v.data(), e.bytes.data(), n * sizeof(float));
      std::copy(v.begin(), v.end(), out.begin());
    } else {
      std::vector<double> v(n);
      std::memcpy(v.data(), e.bytes.data(), n * sizeof(double));
      for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(v[i]);
    }
    return nx::Tensor<T>(e.shape, std::move(out));
  }

  void save(const std::filesystem::path& path) const {
    json header;
    header["format_version"] = kFormatVersion;
    header["precision"] = precision_name(precision_);
    header["meta"] = meta_;
    header["arrays"] = json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, e] : entries_) {
      header["arrays"].push_back({{"name", name},
                                  {"shape", e.shape},
                                  {"offset", offset},
                                  {"bytes", e.bytes.size()},
                                  {"crc32", crc32(e.bytes)}});
      offset += e.bytes.size();
    }
    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    const std::uint64_t len = text.size();
    const std::uint32_t hcrc = crc32(text);
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(&hcrc), sizeof(hcrc));
    for (const auto& [_, e] : entries_) {
      out.write(reinterpret_cast<const char*>(e.bytes.data()),
                static_cast<std::streamsize>(e.bytes.size()));
    }
    if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
  }

  static ArrayBundle load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
      throw FormatError("'" + path.string() + "' is not an array container");
    }
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len > (1ull << 30)) throw FormatError("corrupt header length");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    std::uint32_t hcrc = 0;
    in.read(reinterpret_cast<char*>(&hcrc), sizeof(hcrc));
    if (!in) throw FormatError("truncated header in '" + path.string() + "'");
    if (crc32(text) != hcrc) throw ChecksumError("header checksum mismatch");
    const json header = json::parse(text);
    if (header.at("format_version").get<int>() != kFormatVersion) {
      throw FormatError("unsupported container version " +
                        header.at("format_version").dump());
    }
    const auto prec = header.at("precision").get<std::string>();
    if (prec != "f32" && prec != "f64") throw FormatError("unknown precision " + prec);
    ArrayBundle bundle(prec == "f32" ? Precision::kF32 : Precision::kF64);
    bundle.meta_ = header.at("meta");
    std::vector<std::byte> payload;
    {
      const auto start = in.tellg();
      in.seekg(0, std::ios::end);
      const auto end = in.tellg();
      in.seekg(start);
      payload.resize(static_cast<std::size_t>(end - start));
      in.read(reinterpret_cast<char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    }
    const std::size_t width = prec == "f32" ? sizeof(float) : sizeof(double);
    for (const auto& a : header.at("arrays")) {
      Entry e;
      e.shape = a.at("shape").get<nx::Shape>();
      const auto off = a.at("offset").get<std::uint64_t>();
      const auto bytes = a.at("bytes").get<std::uint64_t>();
      const auto name = a.at("name").get<std::string>();
      if (off + bytes > payload.size() || bytes != nx::numel_of(e.shape) * width) {
        throw FormatError("array '" + name + "' exceeds payload");
      }
      e.bytes.assign(payload.begin() + static_cast<std::ptrdiff_t>(off),
                     payload.begin() + static_cast<std::ptrdiff_t>(off + bytes));
      if (crc32(e.bytes) != a.at("crc32").get<std::uint32_t>()) {
        throw ChecksumError("checksum mismatch for array '" + name + "'");
      }
      bundle.entries_[name] = std::move(e);
    }
    return bundle;
  }

 private:
  struct Entry {
    nx::Shape shape;
    std::vector<std::byte> bytes;
  };
  Precision precision_;
  json meta_ = json::object();
  std::map<std::string, Entry> entries_;
};

/// Writes a flat little-endian float32 file and returns its CRC-32.
inline std::uint32_t write_f32_file(const std::filesystem::path& path,
                                    std::span<const float> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size_bytes()));
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
  return crc32(std::as_bytes(values));
}

inline std::vector<float> read_f32_file(const std::filesystem::path& path,
                                        std::uint32_t expected_crc) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size % sizeof(float) != 0) throw FormatError("'" + path.string() + "' is not float32");
  std::vector<float> out(size / sizeof(float));
  in.seekg(0);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(size));
  if (crc32(std::as_bytes(std::span<const float>(out))) != expected_crc) {
    throw ChecksumError("checksum mismatch for '" + path.string() + "'");
  }
  return out;
}

}  // namespace badclip::io

// SPDX-License-Identifier: Apache-2.0
//
// Weight manifest: named float32 tensors keyed by a config fingerprint.
//
//   "QSLAW\0" | u16 version | u64 fingerprint | u32 record count
//   per record: u32 name length | name bytes | u32 rank | u32 dims[rank] |
//               f32 values[prod(dims)]
//
// All integers and floats little-endian.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qsla/tensor.hpp"

namespace qsla::ad {

inline constexpr std::uint16_t kManifestVersion = 1;
inline constexpr std::size_t kManifestHeaderBytes = 6 + 2 + 8 + 4;

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ManifestRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
  bool operator==(const ManifestRecord&) const = default;
};

struct WeightManifest {
  std::uint64_t fingerprint = 0;
  std::vector<ManifestRecord> records;

  const ManifestRecord* find(const std::string& name) const;
  std::size_t total_values() const;
  bool operator==(const WeightManifest&) const = default;
};

std::vector<std::uint8_t> encode_manifest(const WeightManifest& m);
WeightManifest decode_manifest(std::span<const std::uint8_t> bytes);

void save_manifest(const std::filesystem::path& path, const WeightManifest& m);
WeightManifest load_manifest(const std::filesystem::path& path);

}  // namespace qsla::ad

// SPDX-License-Identifier: Apache-2.0
#include "qsla/manifest.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace qsla::ad {

static_assert(std::endian::native == std::endian::little, "manifest format assumes a little-endian host");

namespace {

constexpr char kMagic[6] = {'Q', 'S', 'L', 'A', 'W', '\0'};

template <typename V>
void put(std::vector<std::uint8_t>& out, V v) {
  const auto at = out.size();
  out.resize(at + sizeof(V));
  std::memcpy(out.data() + at, &v, sizeof(V));
}

class Cursor {
 public:
  explicit Cursor(std::span<const std::uint8_t> b) : b_(b) {}
  void read(void* dst, std::size_t n) {
    if (b_.size() - at_ < n) {
      throw ManifestError("manifest truncated at byte " + std::to_string(at_) + " of " + std::to_string(b_.size()));
    }
    std::memcpy(dst, b_.data() + at_, n);
    at_ += n;
  }
  template <typename V>
  V get() {
    V v;
    read(&v, sizeof(V));
    return v;
  }
  std::size_t remaining() const { return b_.size() - at_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t at_ = 0;
};

}  // namespace

const ManifestRecord* WeightManifest::find(const std::string& name) const {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

std::size_t WeightManifest::total_values() const {
  std::size_t n = 0;
  for (const auto& r : records) n += r.values.size();
  return n;
}

std::vector<std::uint8_t> encode_manifest(const WeightManifest& m) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 6);
  put<std::uint16_t>(out, kManifestVersion);
  put<std::uint64_t>(out, m.fingerprint);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.records.size()));
  for (const auto& r : m.records) {
    if (shape_numel(r.shape) != r.values.size()) {
      throw ManifestError("record '" + r.name + "' has shape " + shape_str(r.shape) + " but " +
                          std::to_string(r.values.size()) + " values");
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    const auto* p = reinterpret_cast<const std::uint8_t*>(r.values.data());
    out.insert(out.end(), p, p + r.values.size() * sizeof(float));
  }
  return out;
}

WeightManifest decode_manifest(std::span<const std::uint8_t> bytes) {
  Cursor c(bytes);
  char magic[6];
  c.read(magic, 6);
  if (std::memcmp(magic, kMagic, 6) != 0) throw ManifestError("not a weight manifest (bad magic)");
  const auto version = c.get<std::uint16_t>();
  if (version != kManifestVersion) {
    throw ManifestError("manifest version " + std::to_string(version) + " is not supported");
  }
  WeightManifest m;
  m.fingerprint = c.get<std::uint64_t>();
  const auto count = c.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    ManifestRecord r;
    const auto len = c.get<std::uint32_t>();
    if (len > c.remaining()) throw ManifestError("manifest truncated in record name");
    r.name.resize(len);
    c.read(r.name.data(), len);
    const auto rank = c.get<std::uint32_t>();
    if (rank > 8) throw ManifestError("record '" + r.name + "' has implausible rank " + std::to_string(rank));
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      r.shape.push_back(c.get<std::uint32_t>());
      n *= r.shape.back();
    }
    if (n > c.remaining() / sizeof(float)) throw ManifestError("manifest truncated in record '" + r.name + "'");
    r.values.resize(n);
    c.read(r.values.data(), n * sizeof(float));
    m.records.push_back(std::move(r));
  }
  if (c.remaining() != 0) throw ManifestError("manifest has " + std::to_string(c.remaining()) + " trailing bytes");
  return m;
}

void save_manifest(const std::filesystem::path& path, const WeightManifest& m) {
  const auto bytes = encode_manifest(m);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ManifestError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ManifestError("write failed: " + path.string());
}

WeightManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ManifestError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_manifest(bytes);
}

}  // namespace qsla::ad

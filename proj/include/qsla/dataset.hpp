// SPDX-License-Identifier: Apache-2.0
//
// Labelled frame collections, the stratified train/val/test split, and the
// .sigds / .splits file formats.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qsla/signal.hpp"

namespace qsla::signal {

/// -20, -18, ..., 20 dB.
inline constexpr std::array<std::int32_t, 21> kSnrGrid = {-20, -18, -16, -14, -12, -10, -8,
                                                          -6,  -4,  -2,  0,   2,   4,   6,
                                                          8,   10,  12,  14,  16,  18,  20};
bool snr_on_grid(std::int32_t snr_db);

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DatasetSpec {
  std::vector<Modulation> classes;
  std::vector<std::int32_t> snrs;
  std::size_t frames_per_cell = 0;
  std::uint64_t seed = 0;
  SynthesisOptions synthesis;

  /// All ten classes, the full SNR grid, 2000 frames per cell.
  static DatasetSpec full_scale(std::uint64_t seed = 0);
  /// Builds a spec from class names; throws SpecError on unknown names.
  static DatasetSpec from_names(const std::vector<std::string>& class_names,
                                std::vector<std::int32_t> snrs, std::size_t frames_per_cell,
                                std::uint64_t seed);

  /// Throws SpecError for off-grid or duplicate SNRs, duplicate classes,
  /// empty axes, or fewer than 10 frames per cell.
  void validate() const;
  std::size_t total_frames() const { return classes.size() * snrs.size() * frames_per_cell; }
  std::vector<std::string> class_names() const;
};

struct Split {
  std::vector<std::uint64_t> train, val, test;
  bool operator==(const Split&) const = default;
};

struct SignalDataset {
  std::vector<std::string> class_names;
  std::vector<std::int32_t> snr_grid;
  std::uint64_t seed = 0;
  std::vector<IQFrame> frames;
  Split split;

  std::size_t num_classes() const { return class_names.size(); }
};

/// Per (label, snr) stratum: val and test each take round(n/10) frames, train
/// the rest. Strata are shuffled by a stream derived from (seed, stratum); the
/// returned lists are sorted. Throws SpecError for strata below 10 frames.
Split stratified_split(std::span<const std::int32_t> labels, std::span<const std::int32_t> snrs,
                       std::uint64_t seed);

/// Frames are ordered class-major, then SNR, then index within the cell.
/// Each frame draws from its own stream, so any thread count gives the same
/// result.
SignalDataset generate_dataset(const DatasetSpec& spec, unsigned threads = 1);

enum class FormatErrorKind { kIo, kBadMagic, kVersion, kTruncated, kMalformed, kChecksum, kSplitMismatch };

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  FormatErrorKind kind() const { return kind_; }

 private:
  FormatErrorKind kind_;
};

inline constexpr std::uint16_t kSigdsVersion = 1;
inline constexpr std::uint16_t kSplitsVersion = 1;
inline constexpr std::size_t kFrameRecordBytes = 2 * kFrameLength * 4 + 4 + 4;

/// Bytes before the first frame record.
std::size_t sigds_header_bytes(const std::vector<std::string>& class_names,
                               const std::vector<std::int32_t>& snr_grid);

/// Encodes frames and metadata (not the split); the last four bytes are the
/// CRC-32 of everything before them.
std::vector<std::uint8_t> encode_frames(const SignalDataset& ds);
/// Inverse of encode_frames; leaves split empty.
SignalDataset decode_frames(std::span<const std::uint8_t> bytes);
/// CRC-32 stored in the trailer of an encoded .sigds image.
std::uint32_t sigds_crc(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_split(const Split& split, std::uint32_t dataset_crc);
Split decode_split(std::span<const std::uint8_t> bytes, std::uint32_t dataset_crc);

/// The sidecar path: same stem, ".splits" extension.
std::filesystem::path splits_path(const std::filesystem::path& sigds);

/// Writes <path> and its .splits sidecar. Returns the dataset CRC.
std::uint32_t write_dataset(const std::filesystem::path& path, const SignalDataset& ds);
/// Reads <path> and its .splits sidecar; every failure is a FormatError.
SignalDataset read_dataset(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace qsla::signal

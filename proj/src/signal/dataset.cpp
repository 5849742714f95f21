// SPDX-License-Identifier: Apache-2.0
#include "qsla/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <thread>
#include <utility>

namespace qsla::signal {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

namespace {

constexpr char kSigdsMagic[6] = {'S', 'I', 'G', 'D', 'S', '\0'};
constexpr char kSplitsMagic[6] = {'S', 'I', 'G', 'S', 'P', '\0'};

// Stream tags keep frame synthesis and split shuffling independent.
constexpr std::uint64_t kFrameStream = 1;
constexpr std::uint64_t kSplitStream = 2;

std::uint64_t snr_id(std::int32_t snr) { return static_cast<std::uint64_t>(static_cast<std::int64_t>(snr) + 1000); }

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large images.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    c = crc32(c, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(c);
}

class Writer {
 public:
  template <typename V>
  void put(V v) {
    const auto at = buf_.size();
    buf_.resize(at + sizeof(V));
    std::memcpy(buf_.data() + at, &v, sizeof(V));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void reserve(std::size_t n) { buf_.reserve(n); }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> b, const char* what) : b_(b), what_(what) {}
  template <typename V>
  V get() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, b_.data() + at_, sizeof(V));
    at_ += sizeof(V);
    return v;
  }
  void get_bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, b_.data() + at_, n);
    at_ += n;
  }
  void need(std::size_t n) const {
    if (b_.size() - at_ < n) {
      throw FormatError(FormatErrorKind::kTruncated, std::string(what_) + ": truncated at byte " +
                                                         std::to_string(at_) + " of " +
                                                         std::to_string(b_.size()));
    }
  }
  std::size_t offset() const { return at_; }
  std::size_t remaining() const { return b_.size() - at_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t at_ = 0;
  const char* what_;
};

void check_magic(Reader& r, const char (&magic)[6], const char* what) {
  char got[6];
  r.get_bytes(got, 6);
  if (std::memcmp(got, magic, 6) != 0) {
    throw FormatError(FormatErrorKind::kBadMagic, std::string(what) + ": bad magic");
  }
}

void check_trailer(std::span<const std::uint8_t> bytes, const char* what) {
  if (bytes.size() < 4) throw FormatError(FormatErrorKind::kTruncated, std::string(what) + ": truncated");
  const auto body = bytes.first(bytes.size() - 4);
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 4);
  const std::uint32_t actual = crc32_of(body);
  if (stored != actual) {
    throw FormatError(FormatErrorKind::kChecksum,
                      std::string(what) + ": checksum mismatch (stored " + std::to_string(stored) +
                          ", computed " + std::to_string(actual) + ")");
  }
}

}  // namespace

bool snr_on_grid(std::int32_t snr_db) { return snr_db >= -20 && snr_db <= 20 && snr_db % 2 == 0; }

DatasetSpec DatasetSpec::full_scale(std::uint64_t seed) {
  DatasetSpec s;
  s.classes.assign(kAllModulations.begin(), kAllModulations.end());
  s.snrs.assign(kSnrGrid.begin(), kSnrGrid.end());
  s.frames_per_cell = 2000;
  s.seed = seed;
  return s;
}

DatasetSpec DatasetSpec::from_names(const std::vector<std::string>& class_names,
                                    std::vector<std::int32_t> snrs, std::size_t frames_per_cell,
                                    std::uint64_t seed) {
  DatasetSpec s;
  for (const auto& n : class_names) {
    const auto m = parse_modulation(n);
    if (!m) throw SpecError("unknown class name '" + n + "'");
    s.classes.push_back(*m);
  }
  s.snrs = std::move(snrs);
  s.frames_per_cell = frames_per_cell;
  s.seed = seed;
  return s;
}

void DatasetSpec::validate() const {
  if (classes.empty()) throw SpecError("dataset spec has no classes");
  if (snrs.empty()) throw SpecError("dataset spec has no SNRs");
  if (std::set<Modulation>(classes.begin(), classes.end()).size() != classes.size()) {
    throw SpecError("dataset spec lists a class twice");
  }
  if (std::set<std::int32_t>(snrs.begin(), snrs.end()).size() != snrs.size()) {
    throw SpecError("dataset spec lists an SNR twice");
  }
  for (auto s : snrs) {
    if (!snr_on_grid(s)) throw SpecError("SNR " + std::to_string(s) + " dB is off the -20..20 step-2 grid");
  }
  if (frames_per_cell < 10) {
    throw SpecError("frames per cell must be at least 10, got " + std::to_string(frames_per_cell));
  }
}

std::vector<std::string> DatasetSpec::class_names() const {
  std::vector<std::string> out;
  for (auto m : classes) out.emplace_back(modulation_name(m));
  return out;
}

Split stratified_split(std::span<const std::int32_t> labels, std::span<const std::int32_t> snrs,
                       std::uint64_t seed) {
  if (labels.size() != snrs.size()) throw SpecError("labels and SNR tags differ in length");
  std::map<std::pair<std::int32_t, std::int32_t>, std::vector<std::uint64_t>> cells;
  for (std::size_t i = 0; i < labels.size(); ++i) cells[{labels[i], snrs[i]}].push_back(i);

  Split out;
  for (auto& [key, idx] : cells) {
    const std::size_t n = idx.size();
    if (n < 10) {
      throw SpecError("stratum (label " + std::to_string(key.first) + ", " + std::to_string(key.second) +
                      " dB) has " + std::to_string(n) + " frames; at least 10 are needed");
    }
    auto rng = CounterRng::derive(seed, {kSplitStream, static_cast<std::uint64_t>(key.first), snr_id(key.second)});
    shuffle(idx, rng);
    const std::size_t held = (n + 5) / 10;  // round(n/10), halves up
    out.val.insert(out.val.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(held));
    out.test.insert(out.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(held),
                    idx.begin() + static_cast<std::ptrdiff_t>(2 * held));
    out.train.insert(out.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(2 * held), idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

SignalDataset generate_dataset(const DatasetSpec& spec, unsigned threads) {
  spec.validate();
  SignalDataset ds;
  ds.class_names = spec.class_names();
  ds.snr_grid = spec.snrs;
  ds.seed = spec.seed;
  const std::size_t per_class = spec.snrs.size() * spec.frames_per_cell;
  ds.frames.resize(spec.total_frames());

  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t f = begin; f < end; ++f) {
      const std::size_t c = f / per_class;
      const std::size_t s = (f % per_class) / spec.frames_per_cell;
      const std::size_t k = f % spec.frames_per_cell;
      const std::int32_t snr = spec.snrs[s];
      auto rng = CounterRng::derive(
          spec.seed, {kFrameStream, static_cast<std::uint64_t>(spec.classes[c]), snr_id(snr), k});
      ds.frames[f] = synthesize_frame(spec.classes[c], static_cast<std::int32_t>(c), snr, rng, spec.synthesis);
    }
  };
  const std::size_t n = ds.frames.size();
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(1, n))));
  if (threads == 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back(work, n * t / threads, n * (t + 1) / threads);
    }
    for (auto& th : pool) th.join();
  }

  std::vector<std::int32_t> labels(n), snrs(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = ds.frames[i].label;
    snrs[i] = ds.frames[i].snr_db;
  }
  ds.split = stratified_split(labels, snrs, spec.seed);
  return ds;
}

std::size_t sigds_header_bytes(const std::vector<std::string>& class_names,
                               const std::vector<std::int32_t>& snr_grid) {
  std::size_t n = 6 + 2 + 2;
  for (const auto& c : class_names) n += 2 + c.size();
  n += 2 + 4 * snr_grid.size();
  n += 8 + 8;
  return n;
}

std::vector<std::uint8_t> encode_frames(const SignalDataset& ds) {
  if (ds.class_names.size() > 0xFFFF || ds.snr_grid.size() > 0xFFFF) {
    throw std::invalid_argument("too many classes or SNRs for the .sigds header");
  }
  Writer w;
  w.reserve(sigds_header_bytes(ds.class_names, ds.snr_grid) + ds.frames.size() * kFrameRecordBytes + 4);
  w.put_bytes(kSigdsMagic, 6);
  w.put<std::uint16_t>(kSigdsVersion);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(ds.class_names.size()));
  for (const auto& c : ds.class_names) {
    if (c.size() > 0xFFFF) throw std::invalid_argument("class name too long");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(c.size()));
    w.put_bytes(c.data(), c.size());
  }
  w.put<std::uint16_t>(static_cast<std::uint16_t>(ds.snr_grid.size()));
  for (auto s : ds.snr_grid) w.put<std::int32_t>(s);
  w.put<std::uint64_t>(ds.seed);
  w.put<std::uint64_t>(ds.frames.size());
  for (const auto& f : ds.frames) {
    w.put_bytes(f.iq.data(), f.iq.size() * sizeof(float));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(f.label));
    w.put<std::int32_t>(f.snr_db);
  }
  const std::uint32_t crc = crc32_of(w.bytes());
  w.put<std::uint32_t>(crc);
  return std::move(w.bytes());
}

std::uint32_t sigds_crc(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError(FormatErrorKind::kTruncated, ".sigds: truncated");
  std::uint32_t v;
  std::memcpy(&v, bytes.data() + bytes.size() - 4, 4);
  return v;
}

SignalDataset decode_frames(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, ".sigds");
  check_magic(r, kSigdsMagic, ".sigds");
  const auto version = r.get<std::uint16_t>();
  if (version != kSigdsVersion) {
    throw FormatError(FormatErrorKind::kVersion, ".sigds: version " + std::to_string(version) +
                                                     " is not supported (expected " +
                                                     std::to_string(kSigdsVersion) + ")");
  }
  SignalDataset ds;
  const auto nclass = r.get<std::uint16_t>();
  for (std::uint16_t c = 0; c < nclass; ++c) {
    const auto len = r.get<std::uint16_t>();
    std::string name(len, '\0');
    r.get_bytes(name.data(), len);
    ds.class_names.push_back(std::move(name));
  }
  const auto nsnr = r.get<std::uint16_t>();
  for (std::uint16_t s = 0; s < nsnr; ++s) ds.snr_grid.push_back(r.get<std::int32_t>());
  ds.seed = r.get<std::uint64_t>();
  const auto count = r.get<std::uint64_t>();
  // Size check before allocating, so a corrupt count cannot request huge memory.
  const std::size_t have = r.remaining();
  if (count > have / kFrameRecordBytes || have < count * kFrameRecordBytes + 4) {
    throw FormatError(FormatErrorKind::kTruncated,
                      ".sigds: header announces " + std::to_string(count) + " frames but only " +
                          std::to_string(have) + " bytes follow");
  }
  if (have != count * kFrameRecordBytes + 4) {
    throw FormatError(FormatErrorKind::kMalformed, ".sigds: " +
                                                       std::to_string(have - count * kFrameRecordBytes - 4) +
                                                       " unexpected trailing bytes");
  }
  check_trailer(bytes, ".sigds");
  ds.frames.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    auto& f = ds.frames[i];
    r.get_bytes(f.iq.data(), f.iq.size() * sizeof(float));
    const auto label = r.get<std::uint32_t>();
    f.snr_db = r.get<std::int32_t>();
    if (label >= nclass) {
      throw FormatError(FormatErrorKind::kMalformed,
                        ".sigds: frame " + std::to_string(i) + " has label " + std::to_string(label) +
                            " but only " + std::to_string(nclass) + " classes");
    }
    f.label = static_cast<std::int32_t>(label);
    for (float v : f.iq) {
      if (!std::isfinite(v)) {
        throw FormatError(FormatErrorKind::kMalformed, ".sigds: frame " + std::to_string(i) + " is not finite");
      }
    }
  }
  return ds;
}

std::vector<std::uint8_t> encode_split(const Split& split, std::uint32_t dataset_crc) {
  Writer w;
  w.put_bytes(kSplitsMagic, 6);
  w.put<std::uint16_t>(kSplitsVersion);
  w.put<std::uint32_t>(dataset_crc);
  for (const auto* part : {&split.train, &split.val, &split.test}) {
    w.put<std::uint64_t>(part->size());
    w.put_bytes(part->data(), part->size() * sizeof(std::uint64_t));
  }
  const std::uint32_t crc = crc32_of(w.bytes());
  w.put<std::uint32_t>(crc);
  return std::move(w.bytes());
}

Split decode_split(std::span<const std::uint8_t> bytes, std::uint32_t dataset_crc) {
  Reader r(bytes, ".splits");
  check_magic(r, kSplitsMagic, ".splits");
  const auto version = r.get<std::uint16_t>();
  if (version != kSplitsVersion) {
    throw FormatError(FormatErrorKind::kVersion, ".splits: version " + std::to_string(version) + " is not supported");
  }
  const auto keyed = r.get<std::uint32_t>();
  check_trailer(bytes, ".splits");
  if (keyed != dataset_crc) {
    throw FormatError(FormatErrorKind::kSplitMismatch,
                      ".splits: keyed to dataset CRC " + std::to_string(keyed) + ", dataset has " +
                          std::to_string(dataset_crc));
  }
  Split s;
  for (auto* part : {&s.train, &s.val, &s.test}) {
    const auto n = r.get<std::uint64_t>();
    if (n > r.remaining() / sizeof(std::uint64_t)) {
      throw FormatError(FormatErrorKind::kTruncated, ".splits: index list overruns the file");
    }
    part->resize(n);
    r.get_bytes(part->data(), n * sizeof(std::uint64_t));
  }
  if (r.remaining() != 4) throw FormatError(FormatErrorKind::kMalformed, ".splits: unexpected trailing bytes");
  return s;
}

std::filesystem::path splits_path(const std::filesystem::path& sigds) {
  auto p = sigds;
  p.replace_extension(".splits");
  return p;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw FormatError(FormatErrorKind::kIo, "read failed: " + path.string());
  return buf;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrorKind::kIo, "write failed: " + path.string());
}

std::uint32_t write_dataset(const std::filesystem::path& path, const SignalDataset& ds) {
  const auto image = encode_frames(ds);
  const std::uint32_t crc = sigds_crc(image);
  write_file(path, image);
  write_file(splits_path(path), encode_split(ds.split, crc));
  return crc;
}

SignalDataset read_dataset(const std::filesystem::path& path) {
  const auto image = read_file(path);
  auto ds = decode_frames(image);
  ds.split = decode_split(read_file(splits_path(path)), sigds_crc(image));
  const std::size_t n = ds.frames.size();
  std::vector<std::uint8_t> seen(n, 0);
  for (const auto* part : {&ds.split.train, &ds.split.val, &ds.split.test}) {
    for (auto i : *part) {
      if (i >= n || seen[i]) {
        throw FormatError(FormatErrorKind::kMalformed, ".splits: index " + std::to_string(i) +
                                                           " is out of range or repeated");
      }
      seen[i] = 1;
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
    throw FormatError(FormatErrorKind::kMalformed, ".splits: lists do not cover every frame");
  }
  return ds;
}

}  // namespace qsla::signal

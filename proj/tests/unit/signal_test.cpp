// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <numbers>

#include "qsla/dataset.hpp"
#include "qsla/signal.hpp"

namespace qsla::signal {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("qsla_signal_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

IQFrame frame_with(float i0, float q0) {
  IQFrame f;
  f.iq[0] = i0;
  f.iq[kFrameLength] = q0;
  return f;
}

TEST(QuadPreprocess, PythagoreanTriple) {
  const auto v = quad_preprocess(frame_with(3.0f, 4.0f));
  EXPECT_FLOAT_EQ(v.a_phi[0], 5.0f);
  EXPECT_NEAR(v.a_phi[kFrameLength], 0.927295, 1e-6);
}

TEST(QuadPreprocess, AxisCase) {
  const auto v = quad_preprocess(frame_with(1.0f, 0.0f));
  EXPECT_FLOAT_EQ(v.a_phi[0], 1.0f);
  EXPECT_FLOAT_EQ(v.a_phi[kFrameLength], 0.0f);
}

TEST(QuadPreprocess, OriginHasZeroPhaseAndNegativeAxisIsPi) {
  const auto v = quad_preprocess(frame_with(0.0f, 0.0f));
  EXPECT_EQ(v.a_phi[0], 0.0f);
  EXPECT_EQ(v.a_phi[kFrameLength], 0.0f);
  const auto w = quad_preprocess(frame_with(-2.0f, 0.0f));
  EXPECT_FLOAT_EQ(w.a_phi[kFrameLength], static_cast<float>(std::numbers::pi));
}

TEST(QuadPreprocess, RowsCopiedAndRoundTripOverTenThousandFrames) {
  CounterRng rng(11);
  double worst = 0.0;
  for (int t = 0; t < 10000; ++t) {
    IQFrame f;
    for (auto& v : f.iq) v = static_cast<float>(rng.normal());
    const auto q = quad_preprocess(f);
    ASSERT_EQ(q.iq, f.iq);
    for (std::size_t n = 0; n < kFrameLength; ++n) {
      ASSERT_EQ(q.i[n], f.i(n));
      ASSERT_EQ(q.q[n], f.q(n));
      const double a = q.a_phi[n], phi = q.a_phi[kFrameLength + n];
      ASSERT_GE(a, 0.0);
      ASSERT_GT(phi, -std::numbers::pi);
      ASSERT_LE(phi, std::numbers::pi);
      worst = std::max(worst, std::abs(a * std::cos(phi) - f.i(n)));
      worst = std::max(worst, std::abs(a * std::sin(phi) - f.q(n)));
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Modulation, NamesRoundTrip) {
  for (auto m : kAllModulations) EXPECT_EQ(parse_modulation(modulation_name(m)), m);
  EXPECT_FALSE(parse_modulation("OOK").has_value());
}

TEST(Modulation, BpskSymbolsArePlusMinusOneOnI) {
  const auto c = constellation(Modulation::kBpsk);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0], Complex(1.0, 0.0));
  EXPECT_EQ(c[1], Complex(-1.0, 0.0));
}

TEST(Modulation, Qam16IsOddIntegerGridOverRootTen) {
  const auto c = constellation(Modulation::kQam16);
  ASSERT_EQ(c.size(), 16u);
  double energy = 0.0;
  for (const auto& p : c) {
    const double re = p.real() * std::sqrt(10.0), im = p.imag() * std::sqrt(10.0);
    EXPECT_NEAR(std::abs(re), std::round(std::abs(re)), 1e-12);
    EXPECT_TRUE(std::lround(std::abs(re)) == 1 || std::lround(std::abs(re)) == 3);
    EXPECT_TRUE(std::lround(std::abs(im)) == 1 || std::lround(std::abs(im)) == 3);
    energy += std::norm(p);
  }
  EXPECT_NEAR(energy / 16.0, 1.0, 1e-12);
}

TEST(Modulation, UnitEnergyAndGrayAdjacency) {
  for (auto m : {Modulation::kBpsk, Modulation::kQpsk, Modulation::k8psk, Modulation::kPam4,
                 Modulation::kQam16, Modulation::kQam64}) {
    const auto c = constellation(m);
    double e = 0.0;
    for (const auto& p : c) e += std::norm(p);
    EXPECT_NEAR(e / c.size(), 1.0, 1e-6) << modulation_name(m);

    double dmin = 1e9;
    for (std::size_t a = 0; a < c.size(); ++a)
      for (std::size_t b = a + 1; b < c.size(); ++b) dmin = std::min(dmin, std::abs(c[a] - c[b]));
    for (std::size_t a = 0; a < c.size(); ++a) {
      for (std::size_t b = a + 1; b < c.size(); ++b) {
        if (std::abs(c[a] - c[b]) < dmin + 1e-9) {
          EXPECT_EQ(std::popcount(static_cast<unsigned>(a ^ b)), 1)
              << modulation_name(m) << " labels " << a << " and " << b;
        }
      }
    }
  }
}

TEST(Modulation, CpfskAndGfskHaveConstantEnvelope) {
  CounterRng rng(5);
  for (auto m : {Modulation::kCpfsk, Modulation::kGfsk, Modulation::kWbfm}) {
    const auto s = modulate(m, 128, rng);
    for (const auto& v : s) EXPECT_NEAR(std::abs(v), 1.0, 1e-12) << modulation_name(m);
  }
}

TEST(Modulation, EveryClassHasUnitPower) {
  CounterRng rng(6);
  for (auto m : kAllModulations) {
    const auto s = modulate(m, 128, rng);
    ASSERT_EQ(s.size(), 128u);
    double p = 0.0;
    for (const auto& v : s) p += std::norm(v);
    EXPECT_NEAR(p / 128.0, 1.0, 1e-12) << modulation_name(m);
  }
}

TEST(Modulation, ShortSourceIsRejected) {
  std::vector<std::uint8_t> bits(10, 1);
  EXPECT_THROW(modulate_bits(Modulation::kQpsk, bits, 128), InsufficientSource);
  std::vector<double> msg(50, 0.0);
  EXPECT_THROW(modulate_analog(Modulation::kAmDsb, msg, 128), InsufficientSource);
}

TEST(Modulation, RrcTapsAreSymmetricUnitEnergy) {
  const auto h = rrc_taps(0.35, 8, 8);
  ASSERT_EQ(h.size(), 65u);
  double e = 0.0;
  for (std::size_t k = 0; k < h.size(); ++k) {
    EXPECT_NEAR(h[k], h[h.size() - 1 - k], 1e-12);
    e += h[k] * h[k];
  }
  EXPECT_NEAR(e, 1.0, 1e-12);
}

TEST(Modulation, BpskStaysOnTheIRail) {
  std::vector<std::uint8_t> bits(bits_required(Modulation::kBpsk, 128, {}));
  for (std::size_t k = 0; k < bits.size(); ++k) bits[k] = static_cast<std::uint8_t>((k * 7 + 3) % 5 < 2);
  const auto s = modulate_bits(Modulation::kBpsk, bits, 128);
  for (const auto& v : s) EXPECT_EQ(v.imag(), 0.0);
}

TEST(Awgn, ZeroDbAddsUnitVarianceSplitAcrossRails) {
  CounterRng rng(9);
  std::vector<Complex> x(200000, Complex(0.0, 0.0));
  awgn_channel(x, 0.0, rng);
  double vi = 0.0, vq = 0.0;
  for (const auto& v : x) {
    vi += v.real() * v.real();
    vq += v.imag() * v.imag();
  }
  vi /= x.size();
  vq /= x.size();
  EXPECT_NEAR(vi, 0.5, 0.01);
  EXPECT_NEAR(vq, 0.5, 0.01);
}

TEST(Awgn, InfiniteSnrIsIdentity) {
  CounterRng rng(10);
  auto x = modulate(Modulation::kQam16, 128, rng);
  const auto before = x;
  awgn_channel(x, std::numeric_limits<double>::infinity(), rng);
  EXPECT_EQ(x, before);
}

TEST(Awgn, EmpiricalSnrAtTwentyDb) {
  CounterRng rng(12);
  double ps = 0.0, pn = 0.0;
  for (int f = 0; f < 10000; ++f) {
    auto x = modulate(kAllModulations[f % 10], 128, rng);
    auto y = x;
    awgn_channel(y, 20.0, rng);
    for (std::size_t n = 0; n < x.size(); ++n) {
      ps += std::norm(x[n]);
      pn += std::norm(y[n] - x[n]);
    }
  }
  EXPECT_NEAR(10.0 * std::log10(ps / pn), 20.0, 0.5);
}

TEST(Synthesis, PowerWithinBoundsAtHighSnr) {
  CounterRng rng(13);
  for (auto snr : {10, 14, 20}) {
    for (std::size_t c = 0; c < kAllModulations.size(); ++c) {
      for (int k = 0; k < 50; ++k) {
        const auto f = synthesize_frame(kAllModulations[c], static_cast<int>(c), snr, rng);
        const double p = frame_power(f);
        EXPECT_GE(p, 0.5);
        EXPECT_LE(p, 2.0);
        EXPECT_EQ(f.label, static_cast<int>(c));
        EXPECT_EQ(f.snr_db, snr);
      }
    }
  }
}

TEST(Synthesis, OffsetsKeepPower) {
  SynthesisOptions opts;
  opts.channel.random_phase = true;
  opts.channel.max_freq_offset = 1e-3;
  CounterRng a(14), b(14);
  const auto f = synthesize_frame(Modulation::kQpsk, 1, 20, a, opts);
  const auto g = synthesize_frame(Modulation::kQpsk, 1, 20, b);
  EXPECT_NE(f.iq, g.iq);
  EXPECT_NEAR(frame_power(f), frame_power(g), 0.2);
}

DatasetSpec small_spec(std::size_t per_cell, std::uint64_t seed) {
  return DatasetSpec::from_names({"BPSK", "QPSK", "8PSK", "QAM16"}, {0, 6, 12, 18}, per_cell, seed);
}

TEST(Dataset, FullScaleSpecHas420000Frames) {
  const auto s = DatasetSpec::full_scale();
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.total_frames(), 420000u);
}

TEST(Dataset, FullScaleSplitIs8To1To1) {
  // The split only depends on the stratum tags, so the full-scale case runs
  // without synthesizing waveforms.
  const auto s = DatasetSpec::full_scale(7);
  std::vector<std::int32_t> labels, snrs;
  for (std::size_t c = 0; c < s.classes.size(); ++c)
    for (auto snr : s.snrs)
      for (std::size_t k = 0; k < s.frames_per_cell; ++k) {
        labels.push_back(static_cast<std::int32_t>(c));
        snrs.push_back(snr);
      }
  const auto split = stratified_split(labels, snrs, 7);
  EXPECT_EQ(split.train.size(), 336000u);
  EXPECT_EQ(split.val.size(), 42000u);
  EXPECT_EQ(split.test.size(), 42000u);
}

TEST(Dataset, SplitIsDisjointCoveringAndStratified) {
  for (std::size_t n : {10u, 11u, 14u, 15u, 19u, 23u, 100u}) {
    std::vector<std::int32_t> labels, snrs;
    for (int c = 0; c < 3; ++c)
      for (int s : {-4, 8})
        for (std::size_t k = 0; k < n; ++k) {
          labels.push_back(c);
          snrs.push_back(s);
        }
    const auto split = stratified_split(labels, snrs, n);
    std::vector<int> seen(labels.size(), 0);
    for (const auto* part : {&split.train, &split.val, &split.test})
      for (auto i : *part) ++seen[i];
    for (int v : seen) EXPECT_EQ(v, 1);
    EXPECT_TRUE(std::is_sorted(split.val.begin(), split.val.end()));
    // Per stratum: within one frame of 8:1:1.
    for (std::size_t cell = 0; cell < 6; ++cell) {
      auto in_cell = [&](const std::vector<std::uint64_t>& v) {
        return std::count_if(v.begin(), v.end(), [&](std::uint64_t i) { return i / n == cell; });
      };
      EXPECT_LE(std::abs(static_cast<double>(in_cell(split.train)) - 0.8 * n), 1.0) << n;
      EXPECT_LE(std::abs(static_cast<double>(in_cell(split.val)) - 0.1 * n), 1.0) << n;
      EXPECT_LE(std::abs(static_cast<double>(in_cell(split.test)) - 0.1 * n), 1.0) << n;
    }
  }
}

TEST(Dataset, SpecErrors) {
  EXPECT_THROW(DatasetSpec::from_names({"BPSK", "OOK"}, {0}, 10, 0), SpecError);
}

TEST(Dataset, SpecValidation) {
  EXPECT_NO_THROW(small_spec(10, 0).validate());
  auto s = small_spec(10, 0);
  s.snrs.push_back(7);
  EXPECT_THROW(s.validate(), SpecError);
  s = small_spec(10, 0);
  s.snrs.push_back(22);
  EXPECT_THROW(s.validate(), SpecError);
  EXPECT_THROW(small_spec(9, 0).validate(), SpecError);
  EXPECT_THROW(generate_dataset(small_spec(9, 0)), SpecError);
}

TEST(Dataset, GenerationIsBalancedAndTagged) {
  const auto ds = generate_dataset(small_spec(10, 3));
  ASSERT_EQ(ds.frames.size(), 160u);
  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    EXPECT_EQ(ds.frames[i].label, static_cast<int>(i / 40));
    EXPECT_EQ(ds.frames[i].snr_db, (std::array<int, 4>{0, 6, 12, 18}[(i / 10) % 4]));
  }
  EXPECT_EQ(ds.split.train.size(), 128u);
  EXPECT_EQ(ds.split.val.size(), 16u);
}

TEST(Dataset, SameSeedGivesIdenticalBytesAcrossThreadCounts) {
  const auto a = encode_frames(generate_dataset(small_spec(12, 42), 1));
  const auto b = encode_frames(generate_dataset(small_spec(12, 42), 3));
  const auto c = encode_frames(generate_dataset(small_spec(12, 43), 1));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Dataset, WriteReadRoundTripAndFileSize) {
  const auto dir = temp_dir("roundtrip");
  const auto ds = generate_dataset(DatasetSpec::from_names({"QPSK", "WBFM"}, {10}, 500, 1));
  ASSERT_EQ(ds.frames.size(), 1000u);
  const auto path = dir / "d.sigds";
  write_dataset(path, ds);
  EXPECT_EQ(fs::file_size(path), sigds_header_bytes(ds.class_names, ds.snr_grid) + 1000 * 1032 + 4);
  EXPECT_EQ(kFrameRecordBytes, 1032u);
  const auto back = read_dataset(path);
  EXPECT_EQ(back.class_names, ds.class_names);
  EXPECT_EQ(back.snr_grid, ds.snr_grid);
  EXPECT_EQ(back.seed, ds.seed);
  EXPECT_EQ(back.frames, ds.frames);
  EXPECT_EQ(back.split, ds.split);
  // Second write of the same dataset is byte-identical.
  const auto again = dir / "e.sigds";
  write_dataset(again, back);
  EXPECT_EQ(read_file(path), read_file(again));
  EXPECT_EQ(read_file(splits_path(path)), read_file(splits_path(again)));
}

FormatErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const FormatError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no FormatError thrown";
  return FormatErrorKind::kIo;
}

TEST(Dataset, CorruptionsRaiseDistinctErrors) {
  const auto ds = generate_dataset(small_spec(10, 2));
  const auto good = encode_frames(ds);
  ASSERT_NO_THROW(decode_frames(good));

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(kind_of([&] { decode_frames(bad_magic); }), FormatErrorKind::kBadMagic);

  auto bad_version = good;
  bad_version[6] = 9;
  EXPECT_EQ(kind_of([&] { decode_frames(bad_version); }), FormatErrorKind::kVersion);

  auto truncated = good;
  truncated.resize(good.size() - 500);
  EXPECT_EQ(kind_of([&] { decode_frames(truncated); }), FormatErrorKind::kTruncated);
  EXPECT_EQ(kind_of([&] { decode_frames(std::span(good).first(4)); }), FormatErrorKind::kTruncated);

  auto flipped = good;
  flipped[good.size() / 2] ^= 0x10;
  EXPECT_EQ(kind_of([&] { decode_frames(flipped); }), FormatErrorKind::kChecksum);

  const auto crc = sigds_crc(good);
  const auto split = encode_split(ds.split, crc);
  EXPECT_EQ(decode_split(split, crc), ds.split);
  EXPECT_EQ(kind_of([&] { decode_split(split, crc ^ 1); }), FormatErrorKind::kSplitMismatch);
  auto split_flipped = split;
  split_flipped[20] ^= 1;
  EXPECT_EQ(kind_of([&] { decode_split(split_flipped, crc); }), FormatErrorKind::kChecksum);

  EXPECT_EQ(kind_of([&] { read_dataset("/nonexistent/x.sigds"); }), FormatErrorKind::kIo);
}

}  // namespace
}  // namespace qsla::signal

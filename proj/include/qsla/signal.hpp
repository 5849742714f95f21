// SPDX-License-Identifier: Apache-2.0
//
// Baseband frame synthesis: the quad-view transform, modulators for the ten
// classes, and the AWGN channel.
#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "qsla/rng.hpp"

namespace qsla::signal {

inline constexpr std::size_t kFrameLength = 128;

using Complex = std::complex<double>;

/// One 2x128 complex baseband frame: row 0 holds I, row 1 holds Q.
struct IQFrame {
  std::array<float, 2 * kFrameLength> iq{};
  std::int32_t label = 0;
  std::int32_t snr_db = 0;

  float i(std::size_t n) const { return iq[n]; }
  float q(std::size_t n) const { return iq[kFrameLength + n]; }
  bool operator==(const IQFrame&) const = default;
};

/// The four network inputs derived from one frame.
struct QuadView {
  std::array<float, 2 * kFrameLength> a_phi{};  // amplitude row, then phase row
  std::array<float, 2 * kFrameLength> iq{};
  std::array<float, kFrameLength> i{};
  std::array<float, kFrameLength> q{};
};

/// Amplitude sqrt(I^2 + Q^2) and four-quadrant phase atan2(Q, I) in
/// (-pi, pi]; phase is 0 where I = Q = 0.
QuadView quad_preprocess(const IQFrame& frame);

enum class Modulation { kBpsk, kQpsk, k8psk, kPam4, kQam16, kQam64, kGfsk, kCpfsk, kAmDsb, kWbfm };

inline constexpr std::array<Modulation, 10> kAllModulations = {
    Modulation::kBpsk, Modulation::kQpsk, Modulation::k8psk,  Modulation::kPam4,
    Modulation::kQam16, Modulation::kQam64, Modulation::kGfsk, Modulation::kCpfsk,
    Modulation::kAmDsb, Modulation::kWbfm};

std::string_view modulation_name(Modulation m);
std::optional<Modulation> parse_modulation(std::string_view name);

bool is_linear(Modulation m);  // symbol-mapped and pulse-shaped
bool is_analog(Modulation m);
/// Bits per symbol for digital schemes; 0 for analog ones.
int bits_per_symbol(Modulation m);

/// Gray-mapped constellation of a linear scheme, indexed by the symbol's bit
/// label (MSB first), scaled to unit average energy.
std::vector<Complex> constellation(Modulation m);

struct ModulatorOptions {
  int samples_per_symbol = 8;
  double rolloff = 0.35;      // root-raised-cosine excess bandwidth
  int filter_span = 8;        // RRC length in symbols
  double fsk_index = 0.5;     // GFSK/CPFSK modulation index
  double gfsk_bt = 0.35;      // Gaussian pulse bandwidth-time product
  double am_depth = 0.8;
  double fm_deviation = 0.05; // peak deviation, cycles per sample
};

class InsufficientSource : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Unit-energy root-raised-cosine taps, span*sps+1 long.
std::vector<double> rrc_taps(double rolloff, int sps, int span);

/// Number of source bits modulate_bits() consumes for `num_samples` outputs.
std::size_t bits_required(Modulation m, std::size_t num_samples, const ModulatorOptions& opts);

/// Digital schemes from an explicit bit stream (one bit per byte, 0/1). Linear
/// schemes are upsampled and RRC-shaped with filter transients trimmed;
/// GFSK/CPFSK are continuous-phase. Output has unit average power.
std::vector<Complex> modulate_bits(Modulation m, std::span<const std::uint8_t> bits,
                                   std::size_t num_samples, const ModulatorOptions& opts = {});

/// AM-DSB (with carrier) or WBFM of a real message; needs num_samples values.
std::vector<Complex> modulate_analog(Modulation m, std::span<const double> message,
                                     std::size_t num_samples, const ModulatorOptions& opts = {});

/// Band-limited stand-in for an audio source: five random low-frequency
/// tones, smoothed by a short low-pass FIR, scaled to peak 1.
std::vector<double> analog_source(std::size_t num_samples, CounterRng& rng);

/// Draws a random source, a random symbol-timing offset, and modulates.
std::vector<Complex> modulate(Modulation m, std::size_t num_samples, CounterRng& rng,
                              const ModulatorOptions& opts = {});

struct ChannelOptions {
  bool random_phase = false;     // static carrier phase, uniform in [0, 2pi)
  double max_freq_offset = 0.0;  // static offset, uniform in [-max, max] cycles/sample
};

/// Adds circular complex Gaussian noise with total variance 10^(-snr_db/10)
/// (half per rail). Assumes unit signal power. Infinite SNR adds nothing.
void awgn_channel(std::span<Complex> x, double snr_db, CounterRng& rng);

void apply_offsets(std::span<Complex> x, const ChannelOptions& opts, CounterRng& rng);

struct SynthesisOptions {
  ModulatorOptions modulator;
  ChannelOptions channel;
};

IQFrame synthesize_frame(Modulation m, std::int32_t label, std::int32_t snr_db, CounterRng& rng,
                         const SynthesisOptions& opts = {});

/// Average |s|^2 of a frame.
double frame_power(const IQFrame& frame);

}  // namespace qsla::signal

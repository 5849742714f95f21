// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numbers>

#include "qsla/signal.hpp"

namespace qsla::signal {

namespace {

constexpr double kPi = std::numbers::pi;

constexpr unsigned gray(unsigned k) { return k ^ (k >> 1); }

std::vector<Complex> psk(unsigned order, double offset) {
  std::vector<Complex> pts(order);
  for (unsigned k = 0; k < order; ++k) {
    pts[gray(k)] = std::polar(1.0, offset + 2.0 * kPi * k / order);
  }
  return pts;
}

std::vector<Complex> square_qam(unsigned order) {
  const auto side = static_cast<unsigned>(std::lround(std::sqrt(static_cast<double>(order))));
  const unsigned half_bits = static_cast<unsigned>(std::lround(std::log2(side)));
  const double norm = std::sqrt(2.0 * (order - 1) / 3.0);
  std::vector<Complex> pts(order);
  for (unsigned ki = 0; ki < side; ++ki) {
    for (unsigned kq = 0; kq < side; ++kq) {
      const double li = 2.0 * ki - (side - 1.0);
      const double lq = 2.0 * kq - (side - 1.0);
      pts[(gray(ki) << half_bits) | gray(kq)] = Complex(li, lq) / norm;
    }
  }
  return pts;
}

void normalize_power(std::vector<Complex>& x) {
  double p = 0.0;
  for (const auto& v : x) p += std::norm(v);
  p /= static_cast<double>(x.size());
  if (p <= 0.0) return;
  const double s = 1.0 / std::sqrt(p);
  for (auto& v : x) v *= s;
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

constexpr int kGaussSpan = 4;  // GFSK pulse length in symbols

std::vector<double> gaussian_taps(double bt, int sps) {
  const int len = kGaussSpan * sps + 1;
  std::vector<double> h(static_cast<std::size_t>(len));
  const double c = 2.0 * kPi * kPi * bt * bt / std::numbers::ln2;
  double s = 0.0;
  for (int n = 0; n < len; ++n) {
    const double t = static_cast<double>(n - len / 2) / sps;
    h[static_cast<std::size_t>(n)] = std::exp(-c * t * t);
    s += h[static_cast<std::size_t>(n)];
  }
  for (auto& v : h) v /= s;
  return h;
}

}  // namespace

QuadView quad_preprocess(const IQFrame& frame) {
  QuadView v;
  v.iq = frame.iq;
  for (std::size_t n = 0; n < kFrameLength; ++n) {
    const float i = frame.i(n), q = frame.q(n);
    v.i[n] = i;
    v.q[n] = q;
    v.a_phi[n] = std::sqrt(i * i + q * q);
    // atan2 already returns 0 at the origin and +pi on the negative real axis.
    v.a_phi[kFrameLength + n] = (i == 0.0f && q == 0.0f) ? 0.0f : std::atan2(q, i);
  }
  return v;
}

std::string_view modulation_name(Modulation m) {
  switch (m) {
    case Modulation::kBpsk: return "BPSK";
    case Modulation::kQpsk: return "QPSK";
    case Modulation::k8psk: return "8PSK";
    case Modulation::kPam4: return "PAM4";
    case Modulation::kQam16: return "QAM16";
    case Modulation::kQam64: return "QAM64";
    case Modulation::kGfsk: return "GFSK";
    case Modulation::kCpfsk: return "CPFSK";
    case Modulation::kAmDsb: return "AM-DSB";
    case Modulation::kWbfm: return "WBFM";
  }
  return "?";
}

std::optional<Modulation> parse_modulation(std::string_view name) {
  for (auto m : kAllModulations) {
    if (modulation_name(m) == name) return m;
  }
  return std::nullopt;
}

bool is_linear(Modulation m) {
  switch (m) {
    case Modulation::kBpsk:
    case Modulation::kQpsk:
    case Modulation::k8psk:
    case Modulation::kPam4:
    case Modulation::kQam16:
    case Modulation::kQam64: return true;
    default: return false;
  }
}

bool is_analog(Modulation m) { return m == Modulation::kAmDsb || m == Modulation::kWbfm; }

int bits_per_symbol(Modulation m) {
  switch (m) {
    case Modulation::kBpsk: return 1;
    case Modulation::kQpsk: return 2;
    case Modulation::k8psk: return 3;
    case Modulation::kPam4: return 2;
    case Modulation::kQam16: return 4;
    case Modulation::kQam64: return 6;
    case Modulation::kGfsk:
    case Modulation::kCpfsk: return 1;
    default: return 0;
  }
}

std::vector<Complex> constellation(Modulation m) {
  switch (m) {
    case Modulation::kBpsk: return {Complex(1.0, 0.0), Complex(-1.0, 0.0)};
    case Modulation::kQpsk: return psk(4, kPi / 4.0);
    case Modulation::k8psk: return psk(8, 0.0);
    case Modulation::kPam4: {
      std::vector<Complex> pts(4);
      for (unsigned k = 0; k < 4; ++k) pts[gray(k)] = Complex((2.0 * k - 3.0) / std::sqrt(5.0), 0.0);
      return pts;
    }
    case Modulation::kQam16: return square_qam(16);
    case Modulation::kQam64: return square_qam(64);
    default:
      throw std::invalid_argument(std::string(modulation_name(m)) + " has no constellation");
  }
}

std::vector<double> rrc_taps(double rolloff, int sps, int span) {
  const int len = span * sps + 1;
  std::vector<double> h(static_cast<std::size_t>(len));
  const double b = rolloff;
  for (int n = 0; n < len; ++n) {
    const double t = static_cast<double>(n - len / 2) / sps;
    double v;
    if (std::abs(t) < 1e-12) {
      v = 1.0 - b + 4.0 * b / kPi;
    } else if (b > 0.0 && std::abs(std::abs(t) - 1.0 / (4.0 * b)) < 1e-9) {
      v = b / std::sqrt(2.0) *
          ((1.0 + 2.0 / kPi) * std::sin(kPi / (4.0 * b)) + (1.0 - 2.0 / kPi) * std::cos(kPi / (4.0 * b)));
    } else {
      v = (std::sin(kPi * t * (1.0 - b)) + 4.0 * b * t * std::cos(kPi * t * (1.0 + b))) /
          (kPi * t * (1.0 - 16.0 * b * b * t * t));
    }
    h[static_cast<std::size_t>(n)] = v;
  }
  double e = 0.0;
  for (double v : h) e += v * v;
  for (auto& v : h) v /= std::sqrt(e);
  return h;
}

std::size_t bits_required(Modulation m, std::size_t num_samples, const ModulatorOptions& opts) {
  const auto sps = static_cast<std::size_t>(opts.samples_per_symbol);
  const auto bps = static_cast<std::size_t>(bits_per_symbol(m));
  if (is_linear(m)) {
    return (static_cast<std::size_t>(opts.filter_span) + ceil_div(num_samples, sps)) * bps;
  }
  if (m == Modulation::kGfsk) return ceil_div(num_samples, sps) + kGaussSpan;
  if (m == Modulation::kCpfsk) return ceil_div(num_samples, sps);
  throw std::invalid_argument(std::string(modulation_name(m)) + " is not a digital scheme");
}

std::vector<Complex> modulate_bits(Modulation m, std::span<const std::uint8_t> bits,
                                   std::size_t num_samples, const ModulatorOptions& opts) {
  const std::size_t need = bits_required(m, num_samples, opts);
  if (bits.size() < need) {
    throw InsufficientSource(std::string(modulation_name(m)) + ": " + std::to_string(num_samples) +
                             " samples need " + std::to_string(need) + " bits, got " +
                             std::to_string(bits.size()));
  }
  const int sps = opts.samples_per_symbol;
  std::vector<Complex> out(num_samples);

  if (is_linear(m)) {
    const auto pts = constellation(m);
    const int bps = bits_per_symbol(m);
    const std::size_t nsym = need / static_cast<std::size_t>(bps);
    std::vector<Complex> syms(nsym);
    for (std::size_t s = 0; s < nsym; ++s) {
      unsigned label = 0;
      for (int b = 0; b < bps; ++b) label = (label << 1) | (bits[s * bps + b] & 1u);
      syms[s] = pts[label];
    }
    const auto taps = rrc_taps(opts.rolloff, sps, opts.filter_span);
    const std::size_t delay = taps.size() - 1;
    // y[n] = sum_k h[k] u[n-k] over the zero-stuffed symbol train u.
    for (std::size_t j = 0; j < num_samples; ++j) {
      const std::size_t n = delay + j;
      Complex acc(0.0, 0.0);
      for (std::size_t k = 0; k < taps.size(); ++k) {
        const std::size_t u = n - k;
        if (u % static_cast<std::size_t>(sps) == 0) acc += taps[k] * syms[u / static_cast<std::size_t>(sps)];
      }
      out[j] = acc;
    }
    normalize_power(out);
    return out;
  }

  // Continuous-phase FSK: frequency pulse integrates to pi*h per symbol.
  const std::size_t nsym = need;
  std::vector<double> freq(nsym * static_cast<std::size_t>(sps));
  for (std::size_t n = 0; n < freq.size(); ++n) {
    freq[n] = bits[n / static_cast<std::size_t>(sps)] ? 1.0 : -1.0;
  }
  std::size_t start = 0;
  if (m == Modulation::kGfsk) {
    const auto g = gaussian_taps(opts.gfsk_bt, sps);
    std::vector<double> shaped(freq.size(), 0.0);
    for (std::size_t n = g.size() - 1; n < freq.size(); ++n) {
      double acc = 0.0;
      for (std::size_t k = 0; k < g.size(); ++k) acc += g[k] * freq[n - k];
      shaped[n] = acc;
    }
    freq.swap(shaped);
    start = g.size() - 1;
  }
  const double step = kPi * opts.fsk_index / sps;
  double phase = 0.0;
  for (std::size_t j = 0; j < num_samples; ++j) {
    phase += step * freq[start + j];
    out[j] = std::polar(1.0, phase);
  }
  return out;
}

std::vector<Complex> modulate_analog(Modulation m, std::span<const double> message,
                                     std::size_t num_samples, const ModulatorOptions& opts) {
  if (!is_analog(m)) {
    throw std::invalid_argument(std::string(modulation_name(m)) + " is not an analog scheme");
  }
  if (message.size() < num_samples) {
    throw InsufficientSource(std::string(modulation_name(m)) + ": " + std::to_string(num_samples) +
                             " samples need as many message values, got " +
                             std::to_string(message.size()));
  }
  std::vector<Complex> out(num_samples);
  if (m == Modulation::kAmDsb) {
    for (std::size_t n = 0; n < num_samples; ++n) out[n] = Complex(1.0 + opts.am_depth * message[n], 0.0);
  } else {
    double phase = 0.0;
    for (std::size_t n = 0; n < num_samples; ++n) {
      phase += 2.0 * kPi * opts.fm_deviation * message[n];
      out[n] = std::polar(1.0, phase);
    }
  }
  normalize_power(out);
  return out;
}

std::vector<double> analog_source(std::size_t num_samples, CounterRng& rng) {
  constexpr std::size_t kTaps = 15;
  constexpr int kTones = 5;
  const std::size_t raw_len = num_samples + kTaps - 1;
  std::vector<double> raw(raw_len, 0.0);
  for (int k = 0; k < kTones; ++k) {
    const double f = rng.uniform(0.002, 0.03);
    const double a = rng.uniform(0.3, 1.0);
    const double ph = rng.uniform(0.0, 2.0 * kPi);
    for (std::size_t n = 0; n < raw_len; ++n) raw[n] += a * std::sin(2.0 * kPi * f * n + ph);
  }
  std::vector<double> lp(kTaps);
  double s = 0.0;
  for (std::size_t k = 0; k < kTaps; ++k) {
    lp[k] = 0.5 - 0.5 * std::cos(2.0 * kPi * (k + 1) / (kTaps + 1));
    s += lp[k];
  }
  std::vector<double> out(num_samples);
  double peak = 0.0;
  for (std::size_t n = 0; n < num_samples; ++n) {
    double acc = 0.0;
    for (std::size_t k = 0; k < kTaps; ++k) acc += lp[k] / s * raw[n + kTaps - 1 - k];
    out[n] = acc;
    peak = std::max(peak, std::abs(acc));
  }
  if (peak > 0.0) {
    for (auto& v : out) v /= peak;
  }
  return out;
}

std::vector<Complex> modulate(Modulation m, std::size_t num_samples, CounterRng& rng,
                              const ModulatorOptions& opts) {
  std::vector<Complex> out;
  if (is_analog(m)) {
    const auto msg = analog_source(num_samples, rng);
    return modulate_analog(m, msg, num_samples, opts);
  }
  const auto sps = static_cast<std::size_t>(opts.samples_per_symbol);
  const std::size_t padded = num_samples + sps;
  std::vector<std::uint8_t> bits(bits_required(m, padded, opts));
  for (auto& b : bits) b = static_cast<std::uint8_t>(rng.next_u64() >> 63);
  const auto stream = modulate_bits(m, bits, padded, opts);
  const std::size_t offset = rng.below(sps);
  out.assign(stream.begin() + static_cast<std::ptrdiff_t>(offset),
             stream.begin() + static_cast<std::ptrdiff_t>(offset + num_samples));
  normalize_power(out);
  return out;
}

void awgn_channel(std::span<Complex> x, double snr_db, CounterRng& rng) {
  if (std::isinf(snr_db) && snr_db > 0) return;
  const double sigma = std::sqrt(std::pow(10.0, -snr_db / 10.0) / 2.0);
  for (auto& v : x) {
    const double ni = rng.normal();
    const double nq = rng.normal();
    v += Complex(sigma * ni, sigma * nq);
  }
}

void apply_offsets(std::span<Complex> x, const ChannelOptions& opts, CounterRng& rng) {
  const double phase = opts.random_phase ? rng.uniform(0.0, 2.0 * kPi) : 0.0;
  const double freq = opts.max_freq_offset > 0.0 ? rng.uniform(-opts.max_freq_offset, opts.max_freq_offset) : 0.0;
  if (phase == 0.0 && freq == 0.0) return;
  for (std::size_t n = 0; n < x.size(); ++n) {
    x[n] *= std::polar(1.0, phase + 2.0 * kPi * freq * static_cast<double>(n));
  }
}

IQFrame synthesize_frame(Modulation m, std::int32_t label, std::int32_t snr_db, CounterRng& rng,
                         const SynthesisOptions& opts) {
  auto x = modulate(m, kFrameLength, rng, opts.modulator);
  apply_offsets(x, opts.channel, rng);
  awgn_channel(x, snr_db, rng);
  IQFrame f;
  f.label = label;
  f.snr_db = snr_db;
  for (std::size_t n = 0; n < kFrameLength; ++n) {
    f.iq[n] = static_cast<float>(x[n].real());
    f.iq[kFrameLength + n] = static_cast<float>(x[n].imag());
  }
  return f;
}

double frame_power(const IQFrame& frame) {
  double p = 0.0;
  for (std::size_t n = 0; n < kFrameLength; ++n) {
    p += static_cast<double>(frame.i(n)) * frame.i(n) + static_cast<double>(frame.q(n)) * frame.q(n);
  }
  return p / kFrameLength;
}

}  // namespace qsla::signal

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <unsupported/Eigen/FFT>

#include "seldde/error.hpp"
#include "seldde/io_dataset.hpp"
#include "seldde/tensor.hpp"

namespace seldde {

struct StftConfig {
  unsigned sample_rate = kSampleRate;
  std::size_t win_length = 512;
  std::size_t hop = 300;
  std::size_t n_fft = 512;
  double cutoff_hz = 9000.0;
  double segment_seconds = 5.0;
  /// Spatial channels are emitted only where W power exceeds the
  /// per-frequency median by this many dB.
  double gate_db = 5.0;
  double log_floor = 1e-10;
  int max_power_iterations = 50;
  double power_tolerance = 1e-12;

  std::size_t num_bins() const { return n_fft / 2 + 1; }
  std::size_t num_frames() const {
    return static_cast<std::size_t>(std::llround(segment_seconds * sample_rate)) / hop;
  }
  double bin_hz() const { return static_cast<double>(sample_rate) / static_cast<double>(n_fft); }
};

inline constexpr std::size_t kNumFeatureChannels = 7;
inline constexpr std::size_t kNumFeatureBins = 200;
inline constexpr std::size_t kNumFeatureFrames = 400;
/// Bins below the 9 kHz cutoff kept verbatim; the 64 bins above are averaged
/// in 8 groups of 8 and the Nyquist bin is dropped.
inline constexpr std::size_t kPassBins = 192;
inline constexpr std::size_t kCompressGroups = 8;
inline constexpr std::size_t kCompressGroupWidth = 8;

/// Complex spectrogram [channels, frames, bins].
using Spectrogram = Tensor<std::complex<double>>;

/// 7-channel SALSA map [7, 400, 200]: channels 0-3 log power of W, Y, Z, X;
/// channels 4-6 the (y, z, x) eigenvector components.
struct FeatureMap {
  Tensor<float> tensor{Shape{kNumFeatureChannels, kNumFeatureFrames, kNumFeatureBins}};
};

inline std::vector<double> periodic_hann(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / n);
  return w;
}

/// Hann-windowed STFT with centred frames: frame t covers samples
/// [t*hop - n_fft/2, t*hop + n_fft/2), zero outside the clip.
inline Spectrogram stft(const FoaClip& clip, const StftConfig& cfg = {}) {
  const auto expected = static_cast<std::size_t>(std::llround(cfg.segment_seconds * cfg.sample_rate));
  if (clip.sample_rate != cfg.sample_rate || clip.num_samples() != expected)
    throw PreconditionError("stft expects a " + std::to_string(cfg.segment_seconds) + " s clip at " +
                            std::to_string(cfg.sample_rate) + " Hz, got " +
                            std::to_string(clip.num_samples()) + " samples");
  const std::size_t frames = cfg.num_frames();
  const std::size_t bins = cfg.num_bins();
  const auto window = periodic_hann(cfg.win_length);
  const std::ptrdiff_t offset = static_cast<std::ptrdiff_t>(cfg.win_length / 2);
  const auto n = static_cast<std::ptrdiff_t>(clip.num_samples());

  Spectrogram spec(Shape{kNumFoaChannels, frames, bins});
  Eigen::FFT<double> fft;
  std::vector<double> buf(cfg.n_fft);
  std::vector<std::complex<double>> out;
  for (std::size_t c = 0; c < kNumFoaChannels; ++c) {
    const float* x = clip.channel(c);
    for (std::size_t t = 0; t < frames; ++t) {
      std::fill(buf.begin(), buf.end(), 0.0);
      const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(t * cfg.hop) - offset;
      for (std::size_t i = 0; i < cfg.win_length; ++i) {
        const std::ptrdiff_t k = start + static_cast<std::ptrdiff_t>(i);
        if (k >= 0 && k < n) buf[i] = window[i] * x[k];
      }
      fft.fwd(out, buf);
      for (std::size_t f = 0; f < bins; ++f) spec(c, t, f) = out[f];
    }
  }
  return spec;
}

namespace detail {

using Cov4 = std::array<std::complex<double>, 16>;

inline double frobenius(const Cov4& r) {
  double s = 0;
  for (const auto& v : r) s += std::norm(v);
  return std::sqrt(s);
}

/// Principal eigenvector of a Hermitian PSD 4x4 matrix by power iteration.
/// Returns false for degenerate input.
inline bool principal_eigenvector(const Cov4& r, int max_iter, double tol,
                                  std::array<std::complex<double>, 4>& v) {
  const double scale = frobenius(r);
  if (!(scale > 0)) return false;
  std::size_t start = 0;
  for (std::size_t i = 1; i < 4; ++i)
    if (r[i * 4 + i].real() > r[start * 4 + start].real()) start = i;
  for (std::size_t i = 0; i < 4; ++i) v[i] = r[i * 4 + start];
  double nv = std::sqrt(std::norm(v[0]) + std::norm(v[1]) + std::norm(v[2]) + std::norm(v[3]));
  if (!(nv > 0)) return false;
  for (auto& x : v) x /= nv;
  for (int it = 0; it < max_iter; ++it) {
    std::array<std::complex<double>, 4> w{};
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) w[i] += r[i * 4 + j] * v[j];
    std::complex<double> lambda = 0;
    for (std::size_t i = 0; i < 4; ++i) lambda += std::conj(v[i]) * w[i];
    double resid = 0;
    for (std::size_t i = 0; i < 4; ++i) resid += std::norm(w[i] - lambda * v[i]);
    const double nw = std::sqrt(std::norm(w[0]) + std::norm(w[1]) + std::norm(w[2]) + std::norm(w[3]));
    if (!(nw > 0)) return false;
    for (std::size_t i = 0; i < 4; ++i) v[i] = w[i] / nw;
    if (std::sqrt(resid) <= tol * scale) break;
  }
  return true;
}

}  // namespace detail

/// Eigenvector-based spatial cues [3, frames, bins] in (y, z, x) order.
///
/// Each bin's 4x4 covariance is summed over its 3x3 time-frequency
/// neighbourhood; the principal eigenvector is phase-aligned so its W entry is
/// real and non-negative, and the real parts of its Y, Z, X entries are emitted.
/// Bins whose W power does not exceed the per-frequency median by `gate_db`
/// are zero.
inline Tensor<float> spatial_eigenvector(const Spectrogram& spec, double gate_db = 5.0,
                                         int max_iter = 50, double tol = 1e-12) {
  if (spec.rank() != 3 || spec.dim(0) != kNumFoaChannels)
    throw PreconditionError("spatial_eigenvector expects a [4, T, F] spectrogram");
  const std::size_t frames = spec.dim(1), bins = spec.dim(2);
  Tensor<float> out(Shape{3, frames, bins});
  if (frames == 0 || bins == 0) return out;

  std::vector<double> w_power(frames * bins);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t f = 0; f < bins; ++f) w_power[t * bins + f] = std::norm(spec(0, t, f));

  const double gate = std::pow(10.0, gate_db / 10.0);
  std::vector<double> threshold(bins);
  std::vector<double> column(frames);
  for (std::size_t f = 0; f < bins; ++f) {
    for (std::size_t t = 0; t < frames; ++t) column[t] = w_power[t * bins + f];
    auto mid = column.begin() + static_cast<std::ptrdiff_t>(frames / 2);
    std::nth_element(column.begin(), mid, column.end());
    threshold[f] = *mid * gate;
  }

  std::array<std::complex<double>, 4> v;
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t f = 0; f < bins; ++f) {
      const double p = w_power[t * bins + f];
      if (!(p > threshold[f]) || !(p > 0)) continue;
      detail::Cov4 r{};
      const std::size_t t0 = t ? t - 1 : 0, t1 = std::min(frames - 1, t + 1);
      const std::size_t f0 = f ? f - 1 : 0, f1 = std::min(bins - 1, f + 1);
      for (std::size_t tt = t0; tt <= t1; ++tt)
        for (std::size_t ff = f0; ff <= f1; ++ff)
          for (std::size_t i = 0; i < 4; ++i) {
            const auto xi = spec(i, tt, ff);
            for (std::size_t j = 0; j < 4; ++j) r[i * 4 + j] += xi * std::conj(spec(j, tt, ff));
          }
      if (!detail::principal_eigenvector(r, max_iter, tol, v)) continue;
      const double mag0 = std::abs(v[0]);
      if (!(mag0 > 1e-12)) continue;
      const std::complex<double> align = std::conj(v[0]) / mag0;
      for (std::size_t k = 0; k < 3; ++k) {
        const double value = std::clamp((v[k + 1] * align).real(), -1.0, 1.0);
        out(k, t, f) = static_cast<float>(value);
      }
    }
  }
  return out;
}

/// [..., T, 257] -> [..., T, 200]: bins 0..191 copied, 192..255 averaged in
/// groups of 8, Nyquist dropped.
template <class T>
Tensor<T> compress_high_freq(const Tensor<T>& x) {
  constexpr std::size_t kRawBins = kPassBins + kCompressGroups * kCompressGroupWidth + 1;
  if (x.rank() < 1 || x.shape().back() != kRawBins)
    throw PreconditionError("compress_high_freq expects 257 bins, got shape " +
                            shape_string(x.shape()));
  Shape shape = x.shape();
  shape.back() = kNumFeatureBins;
  Tensor<T> out(shape);
  const std::size_t rows = x.size() / kRawBins;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * kRawBins;
    T* o = out.data() + r * kNumFeatureBins;
    std::copy(in, in + kPassBins, o);
    for (std::size_t g = 0; g < kCompressGroups; ++g) {
      T acc{};
      for (std::size_t k = 0; k < kCompressGroupWidth; ++k) acc += in[kPassBins + g * kCompressGroupWidth + k];
      o[kPassBins + g] = acc / static_cast<T>(kCompressGroupWidth);
    }
  }
  return out;
}

/// Per-channel standardization statistics fitted on a training set.
struct FeatureStats {
  std::array<double, kNumFeatureChannels> mean{};
  std::array<double, kNumFeatureChannels> std{1, 1, 1, 1, 1, 1, 1};
  int version = 1;

  void apply(FeatureMap& f) const {
    const std::size_t plane = f.tensor.size() / kNumFeatureChannels;
    for (std::size_t c = 0; c < kNumFeatureChannels; ++c) {
      float* p = f.tensor.data() + c * plane;
      const double inv = 1.0 / std[c];
      for (std::size_t i = 0; i < plane; ++i) p[i] = static_cast<float>((p[i] - mean[c]) * inv);
    }
  }
};

/// Streaming accumulator for FeatureStats (population statistics).
class FeatureStatsAccumulator {
 public:
  void add(const FeatureMap& f) {
    const std::size_t plane = f.tensor.size() / kNumFeatureChannels;
    for (std::size_t c = 0; c < kNumFeatureChannels; ++c) {
      const float* p = f.tensor.data() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_[c] += p[i];
        sum_sq_[c] += static_cast<double>(p[i]) * p[i];
      }
      count_[c] += plane;
    }
  }

  FeatureStats finish() const {
    FeatureStats s;
    for (std::size_t c = 0; c < kNumFeatureChannels; ++c) {
      if (count_[c] == 0) continue;
      const double n = static_cast<double>(count_[c]);
      s.mean[c] = sum_[c] / n;
      const double var = std::max(0.0, sum_sq_[c] / n - s.mean[c] * s.mean[c]);
      s.std[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    return s;
  }

 private:
  std::array<double, kNumFeatureChannels> sum_{}, sum_sq_{};
  std::array<std::size_t, kNumFeatureChannels> count_{};
};

inline void to_json(nlohmann::json& j, const FeatureStats& s) {
  j = {{"mean", s.mean}, {"std", s.std}, {"version", s.version}};
}
inline void from_json(const nlohmann::json& j, FeatureStats& s) {
  j.at("mean").get_to(s.mean);
  j.at("std").get_to(s.std);
  s.version = j.value("version", 1);
  for (double v : s.std)
    if (!(v > 0)) throw FormatError("feature stats std must be positive");
}

inline void to_json(nlohmann::json& j, const StftConfig& c) {
  j = {{"sample_rate", c.sample_rate}, {"win_length", c.win_length}, {"hop", c.hop},
       {"n_fft", c.n_fft},             {"window", "hann"},             {"cutoff_hz", c.cutoff_hz},
       {"gate_db", c.gate_db},         {"log_floor", c.log_floor}};
}

/// SALSA features of a 5 s clip; standardized when `stats` is given.
inline FeatureMap extract_salsa(const FoaClip& clip, const StftConfig& cfg = {},
                                const FeatureStats* stats = nullptr) {
  const Spectrogram spec = stft(clip, cfg);
  const std::size_t frames = spec.dim(1), bins = spec.dim(2);
  Tensor<float> logpow(Shape{kNumFoaChannels, frames, bins});
  for (std::size_t i = 0; i < spec.size(); ++i)
    logpow[i] = static_cast<float>(std::log(std::norm(spec[i]) + cfg.log_floor));
  const Tensor<float> spatial =
      spatial_eigenvector(spec, cfg.gate_db, cfg.max_power_iterations, cfg.power_tolerance);

  const Tensor<float> lp = compress_high_freq(logpow);
  const Tensor<float> sp = compress_high_freq(spatial);
  FeatureMap f;
  if (frames != kNumFeatureFrames)
    f.tensor = Tensor<float>(Shape{kNumFeatureChannels, frames, kNumFeatureBins});
  std::copy(lp.values().begin(), lp.values().end(), f.tensor.data());
  std::copy(sp.values().begin(), sp.values().end(), f.tensor.data() + lp.size());
  if (stats) stats->apply(f);
  return f;
}

/// Feature cache: raw little-endian float32 in (channel, time, frequency)
/// order at `<base>.f32`, described by `<base>.json`.
inline void write_feature_cache(const std::string& base, const FeatureMap& f,
                                const StftConfig& cfg = {}, int stats_version = 0) {
  {
    std::ofstream out(base + ".f32", std::ios::binary);
    if (!out) throw IoError("cannot create " + base + ".f32");
    for (float v : f.tensor.values()) {
      std::uint32_t raw;
      std::memcpy(&raw, &v, 4);
      if constexpr (std::endian::native == std::endian::big) raw = __builtin_bswap32(raw);
      out.write(reinterpret_cast<const char*>(&raw), 4);
    }
    if (!out) throw IoError("write failed: " + base + ".f32");
  }
  nlohmann::json side = {{"shape", f.tensor.shape()}, {"stft", cfg}, {"stats_version", stats_version}};
  std::ofstream js(base + ".json");
  if (!js) throw IoError("cannot create " + base + ".json");
  js << side.dump(2) << '\n';
}

inline FeatureMap read_feature_cache(const std::string& base) {
  std::ifstream js(base + ".json");
  if (!js) throw IoError("cannot open " + base + ".json");
  nlohmann::json side;
  try {
    js >> side;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad feature sidecar " + base + ".json: " + e.what());
  }
  const auto shape = side.at("shape").get<Shape>();
  if (shape != Shape{kNumFeatureChannels, kNumFeatureFrames, kNumFeatureBins})
    throw FormatError("unexpected feature shape " + shape_string(shape));
  std::ifstream in(base + ".f32", std::ios::binary);
  if (!in) throw IoError("cannot open " + base + ".f32");
  FeatureMap f;
  for (float& v : f.tensor.storage()) {
    std::uint32_t raw;
    if (!in.read(reinterpret_cast<char*>(&raw), 4)) throw FormatError("truncated feature cache " + base);
    if constexpr (std::endian::native == std::endian::big) raw = __builtin_bswap32(raw);
    std::memcpy(&v, &raw, 4);
  }
  return f;
}

}  // namespace seldde

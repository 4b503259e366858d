#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "seldde/error.hpp"
#include "seldde/io_dataset.hpp"

namespace seldde {

inline constexpr double kDegToRad = std::numbers::pi / 180.0;
inline constexpr double kRadToDeg = 180.0 / std::numbers::pi;

/// Independent generator stream derived from a base seed and a stream id.
inline std::mt19937_64 seeded_rng(std::uint64_t seed, std::uint64_t stream, std::uint32_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    salt};
  return std::mt19937_64(seq);
}

/// SN3D first-order encoding gains in ACN order [W, Y, Z, X].
inline std::array<double, 4> encode_foa_gains(double azimuth_deg, double elevation_deg) {
  const double az = azimuth_deg * kDegToRad;
  const double el = elevation_deg * kDegToRad;
  return {1.0, std::sin(az) * std::cos(el), std::sin(el), std::cos(az) * std::cos(el)};
}

/// Direct-path amplitude gain for a source at `distance_m`.
inline double distance_gain(double distance_m) { return 1.0 / std::max(distance_m, 0.2); }

struct SceneConfig {
  double duration_s = 5.0;
  int num_events = 4;
  std::vector<double> class_weights = std::vector<double>(13, 1.0 / 13.0);
  std::pair<double, double> distance_range_m{0.5, 5.0};
  std::pair<double, double> elevation_range_deg{-45.0, 45.0};
  /// Event length range in 100 ms label frames, inclusive.
  std::pair<int, int> event_frames{5, 20};
  int max_polyphony = 3;
  double snr_db = 30.0;  // +inf disables the diffuse noise floor
  std::uint64_t seed = 0;

  int num_classes() const { return static_cast<int>(class_weights.size()); }

  void validate() const {
    if (!(duration_s > 0)) throw ConfigError("duration must be positive");
    if (num_events < 0) throw ConfigError("num_events must be >= 0");
    if (class_weights.empty()) throw ConfigError("class_weights is empty");
    double sum = 0;
    for (double w : class_weights) {
      if (w < 0) throw ConfigError("class weights must be non-negative");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("class weights must sum to 1");
    if (max_polyphony < 1 || max_polyphony > static_cast<int>(kMaxPolyphony))
      throw ConfigError("max_polyphony must be in [1, 3]");
    if (!(distance_range_m.first > 0) || distance_range_m.second < distance_range_m.first)
      throw ConfigError("invalid distance range");
    if (event_frames.first < 1 || event_frames.second < event_frames.first)
      throw ConfigError("invalid event length range");
  }
};

/// One source placed in a scene; frames are label frames.
struct PlacedEvent {
  int class_idx = 0;
  int source_idx = 0;
  int onset_frame = 0;
  int num_frames = 1;
  double azimuth_deg = 0.0;
  double elevation_deg = 0.0;
  double distance_m = 1.0;
};

struct SceneLayout {
  double duration_s = 5.0;
  int num_classes = 13;
  double snr_db = 30.0;
  std::uint64_t seed = 0;
  std::vector<PlacedEvent> events;
};

/// Centre frequency of the class band; classes are spread log-uniformly
/// between 300 Hz and 8 kHz.
inline double class_center_hz(int class_idx, int num_classes) {
  if (num_classes <= 1) return 1000.0;
  return 300.0 * std::pow(8000.0 / 300.0, static_cast<double>(class_idx) / (num_classes - 1));
}

enum class SignalFamily { noise_burst, tone_complex, chirp };

inline SignalFamily class_family(int class_idx) {
  return static_cast<SignalFamily>(class_idx % 3);
}

/// Unit-RMS band-limited source signal for a class. The family and band are
/// fixed per class; `rng` only varies phases and noise realizations.
inline std::vector<double> make_source_signal(int class_idx, int num_classes, std::size_t length,
                                              std::mt19937_64& rng) {
  std::vector<double> s(length, 0.0);
  if (length == 0) return s;
  const double fc = class_center_hz(class_idx, num_classes);
  const double lo = fc / std::numbers::sqrt2;
  const double hi = std::min(fc * std::numbers::sqrt2, 0.45 * kSampleRate);
  const double fs = kSampleRate;
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);

  switch (class_family(class_idx)) {
    case SignalFamily::noise_burst: {
      std::normal_distribution<double> gauss(0.0, 1.0);
      for (double& v : s) v = gauss(rng);
      Eigen::FFT<double> fft;
      std::vector<std::complex<double>> spec;
      fft.fwd(spec, s);
      const std::size_t n = length;
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t kk = std::min(k, n - k);
        const double f = static_cast<double>(kk) * fs / static_cast<double>(n);
        if (f < lo || f > hi) spec[k] = 0.0;
      }
      fft.inv(s, spec);
      break;
    }
    case SignalFamily::tone_complex: {
      const std::array<double, 3> ratios{0.8, 1.0, 1.25};
      for (double r : ratios) {
        const double f = fc * r;
        const double ph = phase(rng);
        for (std::size_t n = 0; n < length; ++n)
          s[n] += std::sin(2.0 * std::numbers::pi * f * static_cast<double>(n) / fs + ph);
      }
      break;
    }
    case SignalFamily::chirp: {
      // Repeating upward sweep across the band, 250 ms per sweep.
      const double period = 0.25;
      const double rate = (hi - lo) / period;
      double ph = phase(rng);
      for (std::size_t n = 0; n < length; ++n) {
        const double t = std::fmod(static_cast<double>(n) / fs, period);
        const double f = lo + rate * t;
        ph += 2.0 * std::numbers::pi * f / fs;
        s[n] = std::sin(ph);
      }
      break;
    }
  }

  const double energy = std::inner_product(s.begin(), s.end(), s.begin(), 0.0);
  const double rms = std::sqrt(energy / static_cast<double>(length));
  if (rms > 0)
    for (double& v : s) v /= rms;

  // 5 ms raised-cosine fades.
  const std::size_t fade = std::min<std::size_t>(kSampleRate / 200, length / 2);
  for (std::size_t n = 0; n < fade; ++n) {
    const double w = 0.5 - 0.5 * std::cos(std::numbers::pi * (static_cast<double>(n) + 0.5) / fade);
    s[n] *= w;
    s[length - 1 - n] *= w;
  }
  return s;
}

/// Draws event placements for a scene. Placements that would exceed the
/// per-(frame, class) polyphony cap are rejected and redrawn.
inline SceneLayout sample_layout(const SceneConfig& cfg) {
  cfg.validate();
  SceneLayout layout;
  layout.duration_s = cfg.duration_s;
  layout.num_classes = cfg.num_classes();
  layout.snr_db = cfg.snr_db;
  layout.seed = cfg.seed;

  std::mt19937_64 rng(cfg.seed);
  const int total_frames = static_cast<int>(std::llround(cfg.duration_s * 10.0));
  std::discrete_distribution<int> pick_class(cfg.class_weights.begin(), cfg.class_weights.end());
  std::uniform_real_distribution<double> az(-180.0, 180.0);
  std::uniform_real_distribution<double> el(cfg.elevation_range_deg.first,
                                            cfg.elevation_range_deg.second);
  std::uniform_real_distribution<double> dist(cfg.distance_range_m.first,
                                              cfg.distance_range_m.second);
  const int max_len = std::min(cfg.event_frames.second, total_frames);
  const int min_len = std::min(cfg.event_frames.first, max_len);
  std::uniform_int_distribution<int> length(min_len, max_len);

  std::map<std::pair<int, int>, int> occupancy;  // (frame, class) -> active count
  constexpr int kMaxRetries = 1000;
  for (int i = 0; i < cfg.num_events; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxRetries && !placed; ++attempt) {
      PlacedEvent e;
      e.class_idx = pick_class(rng);
      e.num_frames = length(rng);
      e.onset_frame = std::uniform_int_distribution<int>(0, total_frames - e.num_frames)(rng);
      e.azimuth_deg = az(rng);
      e.elevation_deg = el(rng);
      e.distance_m = dist(rng);
      e.source_idx = i;
      bool fits = true;
      for (int f = e.onset_frame; f < e.onset_frame + e.num_frames && fits; ++f)
        fits = occupancy[{f, e.class_idx}] < cfg.max_polyphony;
      if (!fits) continue;
      for (int f = e.onset_frame; f < e.onset_frame + e.num_frames; ++f)
        ++occupancy[{f, e.class_idx}];
      layout.events.push_back(e);
      placed = true;
    }
    if (!placed)
      throw GenerationError("cannot place event " + std::to_string(i) +
                            " within the polyphony cap");
  }
  return layout;
}

/// Renders a layout into FOA audio and frame-level labels.
inline std::pair<FoaClip, EventList> render_scene(const SceneLayout& layout) {
  const auto n = static_cast<std::size_t>(std::llround(layout.duration_s * kSampleRate));
  const int total_frames = static_cast<int>(std::llround(layout.duration_s * 10.0));
  std::vector<std::array<double, 4>> acc(n, {0.0, 0.0, 0.0, 0.0});
  EventList labels;
  labels.num_label_frames = total_frames;

  for (std::size_t i = 0; i < layout.events.size(); ++i) {
    const PlacedEvent& e = layout.events[i];
    auto rng = seeded_rng(layout.seed, i, 0x5eed);
    const std::size_t begin = static_cast<std::size_t>(e.onset_frame) * kSamplesPerLabelFrame;
    const std::size_t end =
        std::min(n, static_cast<std::size_t>(e.onset_frame + e.num_frames) * kSamplesPerLabelFrame);
    if (begin >= end) continue;
    const auto sig = make_source_signal(e.class_idx, layout.num_classes, end - begin, rng);
    const auto g = encode_foa_gains(e.azimuth_deg, e.elevation_deg);
    const double a = distance_gain(e.distance_m);
    for (std::size_t t = begin; t < end; ++t)
      for (std::size_t c = 0; c < 4; ++c) acc[t][c] += a * g[c] * sig[t - begin];
    for (int f = e.onset_frame; f < std::min(total_frames, e.onset_frame + e.num_frames); ++f)
      labels.events.push_back(
          {f, e.class_idx, e.source_idx, wrap_azimuth(e.azimuth_deg), e.elevation_deg, e.distance_m});
  }

  if (std::isfinite(layout.snr_db)) {
    auto rng = seeded_rng(layout.seed, 0, 0xd1ff);
    const double sigma = std::sqrt(std::pow(10.0, -layout.snr_db / 10.0));
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::array<double, 4> scale{sigma, sigma / std::sqrt(3.0), sigma / std::sqrt(3.0),
                                      sigma / std::sqrt(3.0)};
    for (auto& frame : acc)
      for (std::size_t c = 0; c < 4; ++c) frame[c] += scale[c] * gauss(rng);
  }

  FoaClip clip(n, SourceTag::synthetic);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t t = 0; t < n; ++t) clip.channel(c)[t] = static_cast<float>(acc[t][c]);
  sort_events(labels.events);
  return {std::move(clip), std::move(labels)};
}

inline std::pair<FoaClip, EventList> synth_scene(const SceneConfig& cfg) {
  return render_scene(sample_layout(cfg));
}

/// Counts event distances per half-open bin [edges[i], edges[i + 1]).
inline std::vector<std::size_t> distance_histogram(const EventList& events,
                                                   const std::vector<double>& bin_edges) {
  for (std::size_t i = 1; i < bin_edges.size(); ++i)
    if (!(bin_edges[i] > bin_edges[i - 1]))
      throw PreconditionError("bin edges must be strictly increasing");
  std::vector<std::size_t> counts(bin_edges.size() > 1 ? bin_edges.size() - 1 : 0, 0);
  for (const Event& e : events.events) {
    const auto it = std::upper_bound(bin_edges.begin(), bin_edges.end(), e.distance_m);
    if (it == bin_edges.begin() || it == bin_edges.end()) continue;
    ++counts[static_cast<std::size_t>(it - bin_edges.begin()) - 1];
  }
  return counts;
}

}  // namespace seldde

#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "seldde/error.hpp"
#include "seldde/io_dataset.hpp"
#include "seldde/salsa_features.hpp"

namespace seldde {

/// FOA channel swap: optional azimuth / elevation reflection followed by a
/// rotation of k * 90 degrees in azimuth.
struct AcsTransform {
  int k = 0;
  bool reflect_az = false;
  bool reflect_el = false;

  bool is_identity() const { return k == 0 && !reflect_az && !reflect_el; }
  friend bool operator==(const AcsTransform&, const AcsTransform&) = default;
};

inline std::vector<AcsTransform> all_acs_transforms() {
  std::vector<AcsTransform> out;
  for (int k = 0; k < 4; ++k)
    for (int ra = 0; ra < 2; ++ra)
      for (int re = 0; re < 2; ++re) out.push_back({k, ra == 1, re == 1});
  return out;
}

inline Event acs_apply(Event e, const AcsTransform& t) {
  const double az = t.reflect_az ? -e.azimuth_deg : e.azimuth_deg;
  e.azimuth_deg = wrap_azimuth(az + 90.0 * t.k);
  if (t.reflect_el) e.elevation_deg = -e.elevation_deg;
  return e;
}

inline std::pair<FoaClip, EventList> acs_apply(const FoaClip& clip, const EventList& events,
                                               const AcsTransform& t) {
  if (t.k < 0 || t.k > 3) throw PreconditionError("ACS rotation index must be in [0, 3]");
  FoaClip out = clip;
  const std::size_t n = clip.num_samples();
  float* y = out.channel(1);
  float* z = out.channel(2);
  float* x = out.channel(3);
  if (t.reflect_az)
    for (std::size_t i = 0; i < n; ++i) y[i] = -y[i];
  if (t.reflect_el)
    for (std::size_t i = 0; i < n; ++i) z[i] = -z[i];
  for (std::size_t i = 0; i < n; ++i) {
    const float xi = x[i], yi = y[i];
    switch (t.k) {
      case 1: x[i] = -yi; y[i] = xi; break;
      case 2: x[i] = -xi; y[i] = -yi; break;
      case 3: x[i] = yi; y[i] = -xi; break;
      default: break;
    }
  }
  EventList labels = events;
  for (Event& e : labels.events) e = acs_apply(e, t);
  sort_events(labels.events);
  return {std::move(out), std::move(labels)};
}

struct AugPolicy {
  bool enabled = true;
  int time_masks = 2;
  int time_mask_width = 20;  // frames
  int freq_masks = 2;
  int freq_mask_width = 16;  // bins
  double mixup_alpha = 0.2;
  double mixup_probability = 0.5;
  int freq_shift_max = 10;
  double freq_shift_probability = 0.5;
  double acs_probability = 0.5;
  double magnitude_floor = 0.1;

  void validate() const {
    if (time_masks < 0 || time_mask_width < 0 || freq_masks < 0 || freq_mask_width < 0 ||
        freq_shift_max < 0)
      throw ConfigError("augmentation widths and counts must be >= 0");
    for (double p : {mixup_probability, freq_shift_probability, acs_probability, magnitude_floor})
      if (p < 0 || p > 1) throw ConfigError("augmentation probabilities must be in [0, 1]");
    if (!(mixup_alpha > 0)) throw ConfigError("mixup_alpha must be positive");
  }
};

inline void to_json(nlohmann::json& j, const AugPolicy& p) {
  j = {{"enabled", p.enabled},
       {"time_masks", p.time_masks},
       {"time_mask_width", p.time_mask_width},
       {"freq_masks", p.freq_masks},
       {"freq_mask_width", p.freq_mask_width},
       {"mixup_alpha", p.mixup_alpha},
       {"mixup_probability", p.mixup_probability},
       {"freq_shift_max", p.freq_shift_max},
       {"freq_shift_probability", p.freq_shift_probability},
       {"acs_probability", p.acs_probability},
       {"magnitude_floor", p.magnitude_floor}};
}

inline void from_json(const nlohmann::json& j, AugPolicy& p) {
  const AugPolicy d;
  p.enabled = j.value("enabled", d.enabled);
  p.time_masks = j.value("time_masks", d.time_masks);
  p.time_mask_width = j.value("time_mask_width", d.time_mask_width);
  p.freq_masks = j.value("freq_masks", d.freq_masks);
  p.freq_mask_width = j.value("freq_mask_width", d.freq_mask_width);
  p.mixup_alpha = j.value("mixup_alpha", d.mixup_alpha);
  p.mixup_probability = j.value("mixup_probability", d.mixup_probability);
  p.freq_shift_max = j.value("freq_shift_max", d.freq_shift_max);
  p.freq_shift_probability = j.value("freq_shift_probability", d.freq_shift_probability);
  p.acs_probability = j.value("acs_probability", d.acs_probability);
  p.magnitude_floor = j.value("magnitude_floor", d.magnitude_floor);
  p.validate();
}

/// Spectrogram-level augmentation strength for the current learning rate.
inline double aug_magnitude(double current_lr, double peak_lr, double floor = 0.1) {
  if (!(peak_lr > 0)) throw PreconditionError("peak learning rate must be positive");
  return std::clamp(current_lr / peak_lr, floor, 1.0);
}

/// Zeroes frequency columns [begin, end) on every channel.
inline void apply_freq_mask(FeatureMap& f, std::size_t begin, std::size_t end) {
  Tensor<float>& t = f.tensor;
  end = std::min(end, t.dim(2));
  for (std::size_t c = 0; c < t.dim(0); ++c)
    for (std::size_t tt = 0; tt < t.dim(1); ++tt)
      for (std::size_t k = begin; k < end; ++k) t(c, tt, k) = 0.0f;
}

/// Zeroes time rows [begin, end) on every channel.
inline void apply_time_mask(FeatureMap& f, std::size_t begin, std::size_t end) {
  Tensor<float>& t = f.tensor;
  end = std::min(end, t.dim(1));
  for (std::size_t c = 0; c < t.dim(0); ++c)
    for (std::size_t tt = begin; tt < end; ++tt)
      std::fill_n(&t(c, tt, 0), t.dim(2), 0.0f);
}

template <class Rng>
FeatureMap spec_augment(const FeatureMap& f, const AugPolicy& policy, double magnitude, Rng& rng) {
  if (magnitude < 0 || magnitude > 1) throw PreconditionError("magnitude must be in [0, 1]");
  FeatureMap out = f;
  const auto place = [&](int count, int width, std::size_t extent, auto&& apply) {
    const int n = static_cast<int>(std::ceil(magnitude * count));
    const int max_w = static_cast<int>(std::lround(magnitude * width));
    for (int i = 0; i < n; ++i) {
      const auto w = static_cast<std::size_t>(std::uniform_int_distribution<int>(0, max_w)(rng));
      if (w == 0 || w > extent) continue;
      const auto start = std::uniform_int_distribution<std::size_t>(0, extent - w)(rng);
      apply(out, start, start + w);
    }
  };
  place(policy.time_masks, policy.time_mask_width, f.tensor.dim(1), apply_time_mask);
  place(policy.freq_masks, policy.freq_mask_width, f.tensor.dim(2), apply_freq_mask);
  return out;
}

/// A feature map paired with its multi-ACCDDOA target.
struct LabeledFeatures {
  FeatureMap features;
  Tensor<float> target;
};

inline LabeledFeatures mixup_with_lambda(const LabeledFeatures& a, const LabeledFeatures& b, double lambda) {
  if (a.features.tensor.shape() != b.features.tensor.shape() || a.target.shape() != b.target.shape())
    throw PreconditionError("mixup operands differ in shape");
  if (lambda == 1.0) return a;
  if (lambda == 0.0) return b;
  LabeledFeatures out = a;
  const auto blend = [lambda](std::span<float> dst, std::span<const float> other) {
    for (std::size_t i = 0; i < dst.size(); ++i)
      dst[i] = static_cast<float>(lambda * dst[i] + (1.0 - lambda) * other[i]);
  };
  blend(out.features.tensor.values(), b.features.tensor.values());
  blend(out.target.values(), b.target.values());
  return out;
}

/// Linear mixup with lambda ~ Beta(alpha, alpha).
template <class Rng>
LabeledFeatures mixup(const LabeledFeatures& a, const LabeledFeatures& b, double alpha, Rng& rng) {
  if (!(alpha > 0)) throw PreconditionError("mixup alpha must be positive");
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double ga = gamma(rng), gb = gamma(rng);
  const double lambda = ga + gb > 0 ? ga / (ga + gb) : 0.5;
  return mixup_with_lambda(a, b, lambda);
}

/// Shifts every channel along frequency; vacated bins become zero.
inline FeatureMap freq_shift(const FeatureMap& f, int shift, int max_shift = 10) {
  if (std::abs(shift) > max_shift)
    throw PreconditionError("frequency shift " + std::to_string(shift) + " exceeds limit " +
                            std::to_string(max_shift));
  if (shift == 0) return f;
  FeatureMap out = f;
  Tensor<float>& t = out.tensor;
  const auto bins = static_cast<std::ptrdiff_t>(t.dim(2));
  for (std::size_t c = 0; c < t.dim(0); ++c)
    for (std::size_t tt = 0; tt < t.dim(1); ++tt)
      for (std::ptrdiff_t k = 0; k < bins; ++k) {
        const std::ptrdiff_t src = k - shift;
        t(c, tt, static_cast<std::size_t>(k)) =
            src >= 0 && src < bins ? f.tensor(c, tt, static_cast<std::size_t>(src)) : 0.0f;
      }
  return out;
}

}  // namespace seldde

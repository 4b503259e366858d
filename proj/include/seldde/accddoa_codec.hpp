#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "seldde/error.hpp"
#include "seldde/io_dataset.hpp"
#include "seldde/scene_synth.hpp"
#include "seldde/tensor.hpp"

namespace seldde {

inline constexpr std::size_t kNumTracks = 3;
inline constexpr std::size_t kTargetComponents = 4;  // x, y, z, scaled distance
inline constexpr std::size_t kLabelFramesPerSegment = 50;

/// Standardize-then-scale distance mapping into [-1, 1] and its inverse.
struct DistanceScaler {
  double mean_m = 0.0;
  double std_m = 1.0;
  double max_stand = 1.0;
  double d_min_m = 0.0;
  double d_max_m = 0.0;

  double scale(double d) const {
    return std::clamp(((d - mean_m) / std_m) / max_stand, -1.0, 1.0);
  }

  double unscale(double v) const {
    return std::clamp(v * max_stand * std_m + mean_m, d_min_m, d_max_m);
  }

  friend bool operator==(const DistanceScaler&, const DistanceScaler&) = default;
};

/// Fits population mean / std and the largest absolute standardized value.
inline DistanceScaler fit_distance_scaler(std::span<const double> distances) {
  if (distances.size() < 2) throw ValidationError("distance scaler needs at least 2 values");
  for (double d : distances)
    if (!(d > 0) || !std::isfinite(d)) throw ValidationError("distances must be positive");
  const auto [lo, hi] = std::minmax_element(distances.begin(), distances.end());
  if (*lo == *hi) throw ValidationError("distance scaler needs at least 2 distinct values");

  DistanceScaler s;
  const double n = static_cast<double>(distances.size());
  s.mean_m = std::accumulate(distances.begin(), distances.end(), 0.0) / n;
  double ss = 0;
  for (double d : distances) ss += (d - s.mean_m) * (d - s.mean_m);
  s.std_m = std::sqrt(ss / n);
  s.max_stand = 0;
  for (double d : distances) s.max_stand = std::max(s.max_stand, std::abs((d - s.mean_m) / s.std_m));
  s.d_min_m = *lo;
  s.d_max_m = *hi;
  return s;
}

inline DistanceScaler fit_distance_scaler(const std::vector<EventList>& lists) {
  std::vector<double> d;
  for (const auto& l : lists)
    for (const Event& e : l.events) d.push_back(e.distance_m);
  return fit_distance_scaler(d);
}

inline void to_json(nlohmann::json& j, const DistanceScaler& s) {
  j = {{"mean_m", s.mean_m}, {"std_m", s.std_m}, {"max_stand", s.max_stand},
       {"d_min_m", s.d_min_m}, {"d_max_m", s.d_max_m}};
}
inline void from_json(const nlohmann::json& j, DistanceScaler& s) {
  j.at("mean_m").get_to(s.mean_m);
  j.at("std_m").get_to(s.std_m);
  j.at("max_stand").get_to(s.max_stand);
  j.at("d_min_m").get_to(s.d_min_m);
  j.at("d_max_m").get_to(s.d_max_m);
  if (!(s.std_m > 0) || !(s.max_stand > 0) || s.d_max_m < s.d_min_m)
    throw FormatError("invalid distance scaler");
}

inline double scale_distance(double d, const DistanceScaler& s) { return s.scale(d); }
inline double unscale_distance(double v, const DistanceScaler& s) { return s.unscale(v); }

/// Unit DOA vector (x, y, z) for azimuth / elevation in degrees.
inline std::array<double, 3> doa_to_unit(double azimuth_deg, double elevation_deg) {
  const double az = azimuth_deg * kDegToRad, el = elevation_deg * kDegToRad;
  return {std::cos(az) * std::cos(el), std::sin(az) * std::cos(el), std::sin(el)};
}

/// Inverse of doa_to_unit for any non-zero vector; returns {az, el}.
inline std::array<double, 2> unit_to_doa(double x, double y, double z) {
  const double r = std::sqrt(x * x + y * y + z * z);
  const double az = wrap_azimuth(std::atan2(y, x) * kRadToDeg);
  const double el = std::asin(std::clamp(z / r, -1.0, 1.0)) * kRadToDeg;
  return {az, el};
}

/// The 4-vector a single event contributes to a target track.
inline std::array<double, 4> encode_event(const Event& e, const DistanceScaler& s) {
  const auto u = doa_to_unit(e.azimuth_deg, e.elevation_deg);
  return {u[0], u[1], u[2], s.scale(e.distance_m)};
}

/// Groups events by (frame, class), each group ordered by source index.
inline std::map<std::pair<int, int>, std::vector<Event>> group_events(const EventList& events) {
  std::map<std::pair<int, int>, std::vector<Event>> groups;
  for (const Event& e : events.events) groups[{e.frame, e.class_idx}].push_back(e);
  for (auto& [key, g] : groups)
    std::stable_sort(g.begin(), g.end(),
                     [](const Event& a, const Event& b) { return a.source_idx < b.source_idx; });
  return groups;
}

/// Multi-ACCDDOA target [frames, 3 tracks, classes, 4].
template <class T = float>
Tensor<T> encode_labels(const EventList& events, const DistanceScaler& scaler, int num_classes,
                        std::size_t num_frames = kLabelFramesPerSegment) {
  Tensor<T> t(Shape{num_frames, kNumTracks, static_cast<std::size_t>(num_classes), kTargetComponents});
  for (const auto& [key, group] : group_events(events)) {
    const auto [frame, cls] = key;
    if (frame < 0 || static_cast<std::size_t>(frame) >= num_frames)
      throw ValidationError("event frame " + std::to_string(frame) + " outside target tensor");
    if (cls < 0 || cls >= num_classes)
      throw ValidationError("class index " + std::to_string(cls) + " outside [0, C)");
    if (group.size() > kNumTracks)
      throw ValidationError("polyphony exceeds 3 at frame " + std::to_string(frame) + ", class " +
                            std::to_string(cls));
    for (std::size_t k = 0; k < group.size(); ++k) {
      const auto v = encode_event(group[k], scaler);
      for (std::size_t c = 0; c < kTargetComponents; ++c)
        t(static_cast<std::size_t>(frame), k, static_cast<std::size_t>(cls), c) = static_cast<T>(v[c]);
    }
  }
  return t;
}

struct DecodeOptions {
  double act_threshold = 0.5;
  /// Active tracks of one class closer than this many degrees are averaged
  /// into a single event; 0 keeps every active track.
  double merge_deg = 0.0;
  int frame_offset = 0;
};

template <class T>
EventList decode_output(const Tensor<T>& t, const DistanceScaler& scaler, const DecodeOptions& opt = {}) {
  if (t.rank() != 4 || t.dim(1) != kNumTracks || t.dim(3) != kTargetComponents)
    throw PreconditionError("decode_output expects [frames, 3, C, 4], got " + shape_string(t.shape()));
  EventList out;
  const std::size_t frames = t.dim(0), classes = t.dim(2);
  out.num_label_frames = static_cast<int>(frames) + opt.frame_offset;
  for (std::size_t f = 0; f < frames; ++f) {
    for (std::size_t c = 0; c < classes; ++c) {
      std::array<std::array<double, 4>, kNumTracks> rows{};
      std::array<bool, kNumTracks> active{};
      for (std::size_t k = 0; k < kNumTracks; ++k) {
        for (std::size_t i = 0; i < kTargetComponents; ++i) rows[k][i] = static_cast<double>(t(f, k, c, i));
        const double norm = std::sqrt(rows[k][0] * rows[k][0] + rows[k][1] * rows[k][1] + rows[k][2] * rows[k][2]);
        active[k] = norm > opt.act_threshold;
      }
      // Union-find over active tracks whose directions lie within merge_deg.
      std::array<std::size_t, kNumTracks> parent{0, 1, 2};
      auto find = [&](std::size_t i) {
        while (parent[i] != i) i = parent[i];
        return i;
      };
      if (opt.merge_deg > 0) {
        const double cos_lim = std::cos(opt.merge_deg * kDegToRad);
        for (std::size_t a = 0; a < kNumTracks; ++a)
          for (std::size_t b = a + 1; b < kNumTracks; ++b) {
            if (!active[a] || !active[b]) continue;
            const auto& u = rows[a];
            const auto& v = rows[b];
            const double dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
            const double nu = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
            const double nv = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
            if (dot / (nu * nv) >= cos_lim) {
              const std::size_t ra = find(a), rb = find(b);
              parent[std::max(ra, rb)] = std::min(ra, rb);
            }
          }
      }
      std::array<std::size_t, kNumTracks> cluster{};
      for (std::size_t k = 0; k < kNumTracks; ++k) cluster[k] = find(k);
      for (std::size_t k = 0; k < kNumTracks; ++k) {
        if (!active[k] || cluster[k] != k) continue;
        std::array<double, 4> sum{};
        int members = 0;
        for (std::size_t m = 0; m < kNumTracks; ++m) {
          if (!active[m] || cluster[m] != k) continue;
          for (std::size_t i = 0; i < 4; ++i) sum[i] += rows[m][i];
          ++members;
        }
        for (auto& v : sum) v /= members;
        const auto doa = unit_to_doa(sum[0], sum[1], sum[2]);
        out.events.push_back({static_cast<int>(f) + opt.frame_offset, static_cast<int>(c),
                              static_cast<int>(k), doa[0], doa[1], scaler.unscale(sum[3])});
      }
    }
  }
  return out;
}

}  // namespace seldde

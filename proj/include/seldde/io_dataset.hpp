#pragma once

#include <algorithm>
#include <charconv>
#include <fstream>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "seldde/error.hpp"
#include "seldde/resample.hpp"
#include "seldde/tensor.hpp"
#include "seldde/wav.hpp"

namespace seldde {

inline constexpr unsigned kSampleRate = 24000;
inline constexpr std::size_t kNumFoaChannels = 4;
/// Label frames are 100 ms long.
inline constexpr std::size_t kSamplesPerLabelFrame = kSampleRate / 10;
inline constexpr std::size_t kMaxPolyphony = 3;

enum class SourceTag { real, synthetic };

inline std::string to_string(SourceTag t) { return t == SourceTag::real ? "real" : "synthetic"; }
inline SourceTag source_tag_from_string(std::string_view s) {
  if (s == "real") return SourceTag::real;
  if (s == "synthetic") return SourceTag::synthetic;
  throw ValidationError("unknown source tag '" + std::string(s) + "'");
}

/// First-order Ambisonics audio, ACN channel order [W, Y, Z, X], SN3D.
struct FoaClip {
  Tensor<float> samples;  // [4, n_samples]
  unsigned sample_rate = kSampleRate;
  SourceTag source_tag = SourceTag::real;

  FoaClip() : samples(Shape{kNumFoaChannels, 0}) {}
  explicit FoaClip(std::size_t n_samples, SourceTag tag = SourceTag::real)
      : samples(Shape{kNumFoaChannels, n_samples}), source_tag(tag) {}

  std::size_t num_samples() const { return samples.dim(1); }
  double duration_s() const { return static_cast<double>(num_samples()) / sample_rate; }
  float* channel(std::size_t c) { return samples.data() + c * num_samples(); }
  const float* channel(std::size_t c) const { return samples.data() + c * num_samples(); }
};

struct Event {
  int frame = 0;
  int class_idx = 0;
  int source_idx = 0;
  double azimuth_deg = 0.0;
  double elevation_deg = 0.0;
  double distance_m = 1.0;

  friend bool operator==(const Event&, const Event&) = default;
};

struct EventList {
  std::vector<Event> events;
  int num_label_frames = 0;

  std::size_t size() const { return events.size(); }
  bool empty() const { return events.empty(); }
};

/// Wraps an azimuth into [-180, 180).
inline double wrap_azimuth(double az) {
  double w = std::fmod(az + 180.0, 360.0);
  if (w < 0) w += 360.0;
  return w - 180.0;
}

inline void sort_events(std::vector<Event>& events) {
  std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
    return std::tie(a.frame, a.class_idx, a.source_idx, a.azimuth_deg, a.elevation_deg,
                    a.distance_m) < std::tie(b.frame, b.class_idx, b.source_idx,
                                             b.azimuth_deg, b.elevation_deg, b.distance_m);
  });
}

/// Throws ValidationError if any (frame, class) holds more than `cap` events.
inline void check_polyphony(const EventList& list, std::size_t cap = kMaxPolyphony) {
  std::map<std::pair<int, int>, std::size_t> count;
  for (const Event& e : list.events) {
    if (++count[{e.frame, e.class_idx}] > cap)
      throw ValidationError("polyphony exceeds " + std::to_string(cap) + " at frame " +
                            std::to_string(e.frame) + ", class " + std::to_string(e.class_idx));
  }
}

inline void validate_event(const Event& e) {
  if (e.frame < 0) throw ValidationError("negative frame index");
  if (e.class_idx < 0) throw ValidationError("negative class index");
  if (!(e.azimuth_deg >= -180.0 && e.azimuth_deg < 180.0))
    throw ValidationError("azimuth out of [-180, 180)");
  if (!(e.elevation_deg >= -90.0 && e.elevation_deg <= 90.0))
    throw ValidationError("elevation out of [-90, 90]");
  if (!(e.distance_m > 0.0) || !std::isfinite(e.distance_m))
    throw ValidationError("distance must be positive");
}

namespace detail {

template <class N>
N parse_number(std::string_view field, std::size_t line, const char* what) {
  while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
  while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r'))
    field.remove_suffix(1);
  N value{};
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size() || field.empty())
    throw ParseError(std::string("bad ") + what + " '" + std::string(field) + "'", line);
  return value;
}

inline std::string format_number(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

/// Parses header-less "frame,class,source,azimuth,elevation,distance" lines.
/// `distance_scale` converts the distance column to meters (0.01 for cm).
inline EventList parse_metadata_csv(std::istream& in, double distance_scale = 1.0) {
  EventList list;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<std::string_view> fields;
    std::string_view rest(line);
    while (true) {
      const auto comma = rest.find(',');
      fields.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (fields.size() != 6)
      throw ParseError("expected 6 fields, got " + std::to_string(fields.size()), line_no);
    Event e;
    e.frame = detail::parse_number<int>(fields[0], line_no, "frame");
    e.class_idx = detail::parse_number<int>(fields[1], line_no, "class index");
    e.source_idx = detail::parse_number<int>(fields[2], line_no, "source index");
    e.azimuth_deg = detail::parse_number<double>(fields[3], line_no, "azimuth");
    e.elevation_deg = detail::parse_number<double>(fields[4], line_no, "elevation");
    e.distance_m = detail::parse_number<double>(fields[5], line_no, "distance") * distance_scale;
    if (e.azimuth_deg == 180.0) e.azimuth_deg = -180.0;
    try {
      validate_event(e);
    } catch (const ValidationError& err) {
      throw ParseError(err.what(), line_no);
    }
    list.events.push_back(e);
    list.num_label_frames = std::max(list.num_label_frames, e.frame + 1);
  }
  sort_events(list.events);
  list.events.erase(std::unique(list.events.begin(), list.events.end()), list.events.end());
  check_polyphony(list);
  return list;
}

inline EventList parse_metadata_csv(const std::string& text, double distance_scale = 1.0) {
  std::istringstream in(text);
  return parse_metadata_csv(in, distance_scale);
}

inline EventList read_metadata_csv(const std::string& path, double distance_scale = 1.0) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return parse_metadata_csv(in, distance_scale);
}

inline void write_metadata_csv(std::ostream& out, const EventList& list) {
  for (const Event& e : list.events) {
    out << e.frame << ',' << e.class_idx << ',' << e.source_idx << ','
        << detail::format_number(e.azimuth_deg) << ',' << detail::format_number(e.elevation_deg)
        << ',' << detail::format_number(e.distance_m) << '\n';
  }
}

inline void write_metadata_csv(const std::string& path, const EventList& list) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot create " + path);
  write_metadata_csv(out, list);
  if (!out) throw IoError("write failed: " + path);
}

/// Converts decoded WAV audio into a 24 kHz FOA clip.
inline FoaClip to_foa_clip(const wav::Audio& audio, SourceTag tag = SourceTag::real) {
  if (audio.channels.size() != kNumFoaChannels)
    throw FormatError("expected 4 FOA channels, got " + std::to_string(audio.channels.size()));
  std::vector<std::vector<float>> chans;
  if (audio.sample_rate == kSampleRate) {
    chans = audio.channels;
  } else {
    const PolyphaseResampler rs(audio.sample_rate, kSampleRate);
    for (const auto& ch : audio.channels) chans.push_back(rs.process<float>(ch));
  }
  FoaClip clip(chans[0].size(), tag);
  for (std::size_t c = 0; c < kNumFoaChannels; ++c)
    std::copy(chans[c].begin(), chans[c].end(), clip.channel(c));
  return clip;
}

inline FoaClip load_foa_wav(const std::string& path, SourceTag tag = SourceTag::real) {
  return to_foa_clip(wav::read(path), tag);
}

inline void save_foa_wav(const std::string& path, const FoaClip& clip,
                         wav::SampleFormat fmt = wav::SampleFormat::float32) {
  wav::Audio audio;
  audio.sample_rate = clip.sample_rate;
  for (std::size_t c = 0; c < kNumFoaChannels; ++c)
    audio.channels.emplace_back(clip.channel(c), clip.channel(c) + clip.num_samples());
  wav::write(path, audio, fmt);
}

struct Segment {
  FoaClip clip;
  EventList events;
};

/// Splits a clip into consecutive, non-overlapping segments. The last segment
/// is zero-padded; event frames become segment-local.
inline std::vector<Segment> segment_clip(const FoaClip& clip, const EventList& events,
                                         double seg_seconds = 5.0) {
  if (!(seg_seconds > 0)) throw PreconditionError("segment length must be positive");
  const auto seg_len = static_cast<std::size_t>(std::llround(seg_seconds * clip.sample_rate));
  const auto seg_frames = static_cast<int>(std::llround(seg_seconds * 10.0));
  const std::size_t n = clip.num_samples();
  std::size_t n_segs = (n + seg_len - 1) / seg_len;
  for (const Event& e : events.events)
    n_segs = std::max(n_segs, static_cast<std::size_t>(e.frame / seg_frames) + 1);

  std::vector<Segment> out(n_segs);
  for (std::size_t s = 0; s < n_segs; ++s) {
    Segment& seg = out[s];
    seg.clip = FoaClip(seg_len, clip.source_tag);
    seg.clip.sample_rate = clip.sample_rate;
    const std::size_t begin = std::min(n, s * seg_len);
    const std::size_t end = std::min(n, begin + seg_len);
    for (std::size_t c = 0; c < kNumFoaChannels; ++c)
      std::copy(clip.channel(c) + begin, clip.channel(c) + end, seg.clip.channel(c));
    seg.events.num_label_frames = seg_frames;
  }
  for (Event e : events.events) {
    const auto s = static_cast<std::size_t>(e.frame / seg_frames);
    e.frame -= static_cast<int>(s) * seg_frames;
    out[s].events.events.push_back(e);
  }
  return out;
}

}  // namespace seldde

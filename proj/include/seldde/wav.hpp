#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "seldde/error.hpp"

namespace seldde::wav {

enum class SampleFormat { pcm16, float32 };

/// Decoded interleaving-free audio: `channels[c][n]`, scaled to [-1, 1).
struct Audio {
  unsigned sample_rate = 0;
  std::vector<std::vector<float>> channels;
};

namespace detail {

inline std::uint32_t u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}
inline std::uint16_t u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>(v >> 8));
}

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xfffe;

}  // namespace detail

/// Parses a RIFF/WAVE byte buffer. Supports integer PCM (16/24/32 bit) and
/// IEEE float (32/64 bit), plain or WAVE_FORMAT_EXTENSIBLE.
inline Audio decode(const std::vector<unsigned char>& bytes) {
  using namespace detail;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw FormatError("not a RIFF/WAVE file");

  std::uint16_t format = 0, n_channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::size_t len = u32(chunk + 4);
    const std::size_t body = pos + 8;
    const std::size_t avail = std::min(len, bytes.size() - body);
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (avail < 16) throw FormatError("truncated fmt chunk");
      format = u16(chunk + 8);
      n_channels = u16(chunk + 10);
      rate = u32(chunk + 12);
      bits = u16(chunk + 22);
      if (format == kFormatExtensible) {
        if (avail < 26) throw FormatError("truncated extensible fmt chunk");
        format = u16(chunk + 32);
      }
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_len = avail;
    }
    pos = body + len + (len & 1);
  }
  if (n_channels == 0 || rate == 0) throw FormatError("missing fmt chunk");
  if (data == nullptr) throw FormatError("missing data chunk");

  const std::size_t bytes_per_sample = bits / 8;
  const bool ok = (format == kFormatPcm && (bits == 16 || bits == 24 || bits == 32)) ||
                  (format == kFormatFloat && (bits == 32 || bits == 64));
  if (!ok)
    throw FormatError("unsupported sample format " + std::to_string(format) + "/" +
                      std::to_string(bits) + " bit");

  const std::size_t frame_bytes = bytes_per_sample * n_channels;
  const std::size_t n = data_len / frame_bytes;
  Audio audio;
  audio.sample_rate = rate;
  audio.channels.assign(n_channels, std::vector<float>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < n_channels; ++c) {
      const unsigned char* p = data + i * frame_bytes + c * bytes_per_sample;
      float v = 0.0f;
      if (format == kFormatFloat && bits == 32) {
        std::uint32_t raw = u32(p);
        std::memcpy(&v, &raw, 4);
      } else if (format == kFormatFloat) {
        std::uint64_t raw = u32(p) | std::uint64_t(u32(p + 4)) << 32;
        double d;
        std::memcpy(&d, &raw, 8);
        v = static_cast<float>(d);
      } else if (bits == 16) {
        v = static_cast<float>(static_cast<std::int16_t>(u16(p))) / 32768.0f;
      } else if (bits == 24) {
        std::int32_t s = static_cast<std::int32_t>(p[0] << 8 | p[1] << 16 | p[2] << 24) >> 8;
        v = static_cast<float>(static_cast<double>(s) / 8388608.0);
      } else {
        v = static_cast<float>(static_cast<double>(static_cast<std::int32_t>(u32(p))) / 2147483648.0);
      }
      audio.channels[c][i] = v;
    }
  }
  return audio;
}

inline Audio read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  if (in.bad()) throw IoError("read failed: " + path);
  return decode(bytes);
}

inline std::string encode(const Audio& audio, SampleFormat fmt = SampleFormat::float32) {
  using namespace detail;
  const auto n_channels = static_cast<std::uint16_t>(audio.channels.size());
  const std::size_t n = n_channels ? audio.channels[0].size() : 0;
  for (const auto& ch : audio.channels)
    if (ch.size() != n) throw PreconditionError("channels differ in length");
  const std::uint16_t bits = fmt == SampleFormat::float32 ? 32 : 16;
  const std::uint32_t data_len = static_cast<std::uint32_t>(n * n_channels * bits / 8);

  std::string s;
  s.reserve(44 + data_len);
  s += "RIFF";
  put_u32(s, 36 + data_len);
  s += "WAVEfmt ";
  put_u32(s, 16);
  put_u16(s, fmt == SampleFormat::float32 ? kFormatFloat : kFormatPcm);
  put_u16(s, n_channels);
  put_u32(s, audio.sample_rate);
  put_u32(s, audio.sample_rate * n_channels * bits / 8);
  put_u16(s, static_cast<std::uint16_t>(n_channels * bits / 8));
  put_u16(s, bits);
  s += "data";
  put_u32(s, data_len);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < n_channels; ++c) {
      const float v = audio.channels[c][i];
      if (fmt == SampleFormat::float32) {
        std::uint32_t raw;
        std::memcpy(&raw, &v, 4);
        put_u32(s, raw);
      } else {
        const float clipped = std::clamp(v, -1.0f, 32767.0f / 32768.0f);
        put_u16(s, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(clipped * 32768.0f))));
      }
    }
  }
  return s;
}

inline void write(const std::string& path, const Audio& audio,
                  SampleFormat fmt = SampleFormat::float32) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path);
  const std::string bytes = encode(audio, fmt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace seldde::wav

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "seldde/accddoa_codec.hpp"
#include "seldde/error.hpp"
#include "seldde/model.hpp"
#include "seldde/salsa_features.hpp"

namespace seldde {

inline constexpr const char* kVersion = "seldde-0.1.0";
inline constexpr char kCheckpointMagic[8] = {'S', 'E', 'L', 'D', 'D', 'E', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointFormat = 1;

/// Everything needed to run a trained model on new audio.
struct Checkpoint {
  ModelConfig model;
  DistanceScaler scaler;
  FeatureStats stats;
  AlignedVector<float> weights;
  std::string version = kVersion;
  nlohmann::json info = nlohmann::json::object();  // free-form training metadata
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_le(std::istream& in, int bytes, const std::string& path) {
  unsigned char b[8] = {};
  if (!in.read(reinterpret_cast<char*>(b), bytes)) throw FormatError("truncated checkpoint " + path);
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace detail

/// Layout: 8-byte magic, u32 format, u64 header length, JSON header,
/// then the weights as little-endian float32 in parameter-layout order.
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const SeldModel m(ck.model);
  if (ck.weights.size() != m.num_parameters())
    throw PreconditionError("checkpoint weights do not match the model config");
  nlohmann::json params = nlohmann::json::array();
  for (const auto& s : m.layout().specs())
    params.push_back({{"name", s.name}, {"shape", s.shape}, {"offset", s.ref.offset}});
  const nlohmann::json header = {{"version", ck.version}, {"model", ck.model},     {"scaler", ck.scaler},
                                 {"feature_stats", ck.stats}, {"num_parameters", ck.weights.size()},
                                 {"parameters", params},    {"info", ck.info}};
  const std::string h = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot create " + tmp);
    out.write(kCheckpointMagic, 8);
    detail::put_u32(out, kCheckpointFormat);
    detail::put_u64(out, h.size());
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (float v : ck.weights) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
    if (!out) throw IoError("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot move checkpoint to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw FormatError(path + " is not a checkpoint");
  const auto format = detail::get_le(in, 4, path);
  if (format != kCheckpointFormat) throw FormatError("unsupported checkpoint format " + std::to_string(format));
  const auto len = detail::get_le(in, 8, path);
  if (len > (std::uint64_t{1} << 30)) throw FormatError("implausible checkpoint header length");
  std::string h(len, '\0');
  if (!in.read(h.data(), static_cast<std::streamsize>(len))) throw FormatError("truncated checkpoint " + path);

  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(h);
    ck.version = header.at("version").get<std::string>();
    ck.model = header.at("model").get<ModelConfig>();
    ck.scaler = header.at("scaler").get<DistanceScaler>();
    ck.stats = header.at("feature_stats").get<FeatureStats>();
    ck.info = header.value("info", nlohmann::json::object());
    const SeldModel m(ck.model);
    const auto n = header.at("num_parameters").get<std::size_t>();
    const auto& params = header.at("parameters");
    if (n != m.num_parameters() || params.size() != m.layout().specs().size())
      throw FormatError("checkpoint parameter count does not match its model config");
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& s = m.layout().specs()[i];
      if (params[i].at("name").get<std::string>() != s.name || params[i].at("shape").get<Shape>() != s.shape)
        throw FormatError("checkpoint parameter '" + s.name + "' does not match the architecture");
    }
    ck.weights.resize(n);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad checkpoint header in " + path + ": " + e.what());
  }
  for (float& v : ck.weights) v = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(in, 4, path)));
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes in checkpoint " + path);
  return ck;
}

}  // namespace seldde

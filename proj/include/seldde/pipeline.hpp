#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "seldde/accddoa_codec.hpp"
#include "seldde/adpit_loss.hpp"
#include "seldde/augment.hpp"
#include "seldde/checkpoint.hpp"
#include "seldde/error.hpp"
#include "seldde/io_dataset.hpp"
#include "seldde/metrics.hpp"
#include "seldde/model.hpp"
#include "seldde/optim.hpp"
#include "seldde/salsa_features.hpp"
#include "seldde/scene_synth.hpp"

namespace seldde {

namespace fs = std::filesystem;

inline constexpr const char* kCacheDirEnv = "SELDDE_CACHE_DIR";

// ---------------------------------------------------------------------------
// Manifests

inline double distance_unit_scale(const std::string& unit) {
  if (unit == "m") return 1.0;
  if (unit == "cm") return 0.01;
  throw ConfigError("unknown distance unit '" + unit + "' (expected m or cm)");
}

struct ManifestEntry {
  std::string audio;     // absolute or resolved path
  std::string metadata;  // empty when unlabeled
  SourceTag source_tag = SourceTag::real;
};

/// A named list of recordings. Relative paths resolve against the manifest
/// file's directory.
struct Manifest {
  std::string name;
  std::vector<ManifestEntry> files;
  std::string distance_unit = "m";  // unit of the metadata distance column
  nlohmann::json extra = nlohmann::json::object();  // e.g. generator seed and config

  double distance_scale() const { return distance_unit_scale(distance_unit); }
};

/// `unit_override`, when non-empty, replaces the manifest's distance unit.
inline Manifest read_manifest(const std::string& path, const std::string& unit_override = "") {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest " + path + " is not valid JSON: " + e.what());
  }
  const fs::path base = fs::absolute(path).parent_path();
  const auto resolve = [&](const std::string& p) { return p.empty() ? p : (base / p).lexically_normal().string(); };
  Manifest m;
  try {
    m.name = j.value("name", fs::path(path).stem().string());
    m.distance_unit = unit_override.empty() ? j.value("distance_unit", std::string{"m"}) : unit_override;
    distance_unit_scale(m.distance_unit);
    for (const auto& [k, v] : j.items())
      if (k != "name" && k != "files" && k != "distance_unit") m.extra[k] = v;
    for (const auto& f : j.at("files")) {
      ManifestEntry e;
      e.audio = resolve(f.at("audio").get<std::string>());
      e.metadata = resolve(f.value("metadata", std::string{}));
      e.source_tag = source_tag_from_string(f.value("source_tag", std::string{"real"}));
      m.files.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("manifest " + path + ": " + e.what());
  }
  return m;
}

/// Writes paths relative to the manifest's directory when possible.
inline void write_manifest(const std::string& path, const Manifest& m) {
  const fs::path base = fs::absolute(path).parent_path();
  const auto rel = [&](const std::string& p) {
    return p.empty() ? p : fs::absolute(p).lexically_relative(base).string();
  };
  nlohmann::json files = nlohmann::json::array();
  for (const auto& f : m.files)
    files.push_back({{"audio", rel(f.audio)}, {"metadata", rel(f.metadata)}, {"source_tag", to_string(f.source_tag)}});
  std::ofstream out(path);
  if (!out) throw IoError("cannot create " + path);
  nlohmann::json j = m.extra;
  j["name"] = m.name;
  j["distance_unit"] = m.distance_unit;
  j["files"] = files;
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Training configuration

struct DecodeConfig {
  double act_threshold = 0.5;
  double merge_deg = 15.0;
};

inline void to_json(nlohmann::json& j, const DecodeConfig& d) {
  j = {{"act_threshold", d.act_threshold}, {"merge_deg", d.merge_deg}};
}
inline void from_json(const nlohmann::json& j, DecodeConfig& d) {
  const DecodeConfig def;
  d.act_threshold = j.value("act_threshold", def.act_threshold);
  d.merge_deg = j.value("merge_deg", def.merge_deg);
}

struct TrainConfig {
  int epochs = 200;
  int finetune_epochs = 50;
  int batch_size = 32;
  double peak_lr = 5e-4;
  /// Steps of linear warmup; 0 selects 5% of the stage's total steps.
  int warmup_steps = 0;
  double finetune_lr_ratio = 0.1;
  std::uint64_t seed = 0;
  bool deterministic = true;
  int validate_every = 1;  // epochs
  std::string train_synthetic;
  std::string train_real;
  std::string validation;
  ModelConfig model;
  AugPolicy augment;
  DecodeConfig decode;
  std::string checkpoint_dir = "checkpoints";
  /// Overrides every manifest's distance unit when non-empty ("m" or "cm").
  std::string distance_unit;

  void validate() const {
    if (epochs < 0 || finetune_epochs < 0) throw ConfigError("epoch counts must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 1 (or 0 for the default)");
    if (!(peak_lr > 0)) throw ConfigError("peak_lr must be positive");
    if (!(finetune_lr_ratio > 0)) throw ConfigError("finetune_lr_ratio must be positive");
    if (validate_every < 1) throw ConfigError("validate_every must be >= 1");
    if (train_synthetic.empty() && train_real.empty()) throw ConfigError("no training manifest given");
    if (checkpoint_dir.empty()) throw ConfigError("checkpoint_dir is empty");
    if (!distance_unit.empty()) distance_unit_scale(distance_unit);
    model.validate();
    augment.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"finetune_epochs", c.finetune_epochs},
       {"batch_size", c.batch_size},
       {"peak_lr", c.peak_lr},
       {"warmup_steps", c.warmup_steps},
       {"finetune_lr_ratio", c.finetune_lr_ratio},
       {"seed", c.seed},
       {"deterministic", c.deterministic},
       {"validate_every", c.validate_every},
       {"train_synthetic", c.train_synthetic},
       {"train_real", c.train_real},
       {"validation", c.validation},
       {"model", c.model},
       {"augment", c.augment},
       {"decode", c.decode},
       {"checkpoint_dir", c.checkpoint_dir},
       {"distance_unit", c.distance_unit}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.finetune_epochs = j.value("finetune_epochs", d.finetune_epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.peak_lr = j.value("peak_lr", d.peak_lr);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.finetune_lr_ratio = j.value("finetune_lr_ratio", d.finetune_lr_ratio);
  c.seed = j.value("seed", d.seed);
  c.deterministic = j.value("deterministic", d.deterministic);
  c.validate_every = j.value("validate_every", d.validate_every);
  c.train_synthetic = j.value("train_synthetic", d.train_synthetic);
  c.train_real = j.value("train_real", d.train_real);
  c.validation = j.value("validation", d.validation);
  c.model = j.contains("model") ? j.at("model").get<ModelConfig>() : d.model;
  c.augment = j.contains("augment") ? j.at("augment").get<AugPolicy>() : d.augment;
  c.decode = j.contains("decode") ? j.at("decode").get<DecodeConfig>() : d.decode;
  c.checkpoint_dir = j.value("checkpoint_dir", d.checkpoint_dir);
  c.distance_unit = j.value("distance_unit", d.distance_unit);
}

/// Reads a JSON TrainConfig; manifest and checkpoint paths resolve against
/// the config file's directory.
inline TrainConfig read_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  TrainConfig c;
  try {
    nlohmann::json j;
    in >> j;
    c = j.get<TrainConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  const fs::path base = fs::absolute(path).parent_path();
  for (std::string* p : {&c.train_synthetic, &c.train_real, &c.validation, &c.checkpoint_dir})
    if (!p->empty()) *p = (base / *p).lexically_normal().string();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Dataset assembly

/// One 5 s training or evaluation unit.
struct Sample {
  FeatureMap features;  // standardized once stats are applied
  EventList events;     // segment-local frames
  SourceTag source_tag = SourceTag::real;
  std::size_t clip = 0;
  std::size_t segment = 0;
  std::optional<FoaClip> audio;  // kept when waveform augmentation needs it
  bool silent = false;
};

struct Dataset {
  std::string name;
  std::vector<Sample> samples;
  std::vector<std::size_t> clip_segments;  // segments per clip
  std::vector<EventList> clip_events;      // clip-global references
};

namespace detail {

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline bool all_zero(const FoaClip& c) {
  return std::all_of(c.samples.values().begin(), c.samples.values().end(), [](float v) { return v == 0.0f; });
}

}  // namespace detail

/// Cache directory from the environment, or empty when caching is off.
inline std::string cache_dir_from_env() {
  const char* v = std::getenv(kCacheDirEnv);
  return v ? std::string(v) : std::string{};
}

/// Cache key: audio path, size, modification time, segment and STFT settings.
inline std::string feature_cache_key(const std::string& audio, std::size_t segment, const StftConfig& cfg) {
  std::string id = fs::absolute(audio).lexically_normal().string();
  std::error_code ec;
  const auto size = fs::file_size(audio, ec);
  const auto mtime = fs::last_write_time(audio, ec).time_since_epoch().count();
  id += '|' + std::to_string(ec ? 0 : size) + '|' + std::to_string(ec ? 0 : mtime);
  id += '|' + std::to_string(segment) + '|' + nlohmann::json(cfg).dump();
  return detail::hex64(detail::fnv1a(id));
}

inline FeatureMap cached_features(const Segment& seg, const std::string& audio, std::size_t index,
                                  const StftConfig& cfg, const std::string& cache_dir) {
  if (cache_dir.empty()) return extract_salsa(seg.clip, cfg);
  const std::string base = (fs::path(cache_dir) / feature_cache_key(audio, index, cfg)).string();
  if (fs::exists(base + ".f32") && fs::exists(base + ".json")) {
    try {
      return read_feature_cache(base);
    } catch (const Error&) {
      // stale or damaged entry; recompute below
    }
  }
  FeatureMap f = extract_salsa(seg.clip, cfg);
  fs::create_directories(cache_dir);
  write_feature_cache(base, f, cfg);
  return f;
}

/// Loads, segments and featurizes every file of a manifest (features are
/// left unstandardized).
inline Dataset load_dataset(const Manifest& m, int num_classes, const std::string& cache_dir,
                            bool keep_audio = false, bool require_labels = true, const StftConfig& cfg = {}) {
  Dataset d;
  d.name = m.name;
  for (std::size_t ci = 0; ci < m.files.size(); ++ci) {
    const ManifestEntry& e = m.files[ci];
    const FoaClip clip = load_foa_wav(e.audio, e.source_tag);
    EventList events;
    if (!e.metadata.empty()) {
      events = read_metadata_csv(e.metadata, m.distance_scale());
    } else if (require_labels) {
      throw ConfigError("manifest entry " + e.audio + " has no metadata");
    }
    for (const Event& ev : events.events)
      if (ev.class_idx >= num_classes)
        throw ValidationError(e.metadata + ": class " + std::to_string(ev.class_idx) + " outside [0, " +
                              std::to_string(num_classes) + ")");
    auto segs = segment_clip(clip, events, cfg.segment_seconds);
    d.clip_segments.push_back(segs.size());
    d.clip_events.push_back(events);
    for (std::size_t s = 0; s < segs.size(); ++s) {
      Sample smp;
      smp.features = cached_features(segs[s], e.audio, s, cfg, cache_dir);
      smp.events = std::move(segs[s].events);
      smp.source_tag = e.source_tag;
      smp.clip = ci;
      smp.segment = s;
      smp.silent = detail::all_zero(segs[s].clip);
      if (keep_audio && e.source_tag == SourceTag::real) smp.audio = std::move(segs[s].clip);
      d.samples.push_back(std::move(smp));
    }
  }
  return d;
}

inline FeatureStats fit_feature_stats(const std::vector<const Dataset*>& sets) {
  FeatureStatsAccumulator acc;
  for (const Dataset* d : sets)
    for (const Sample& s : d->samples) acc.add(s.features);
  return acc.finish();
}

inline void standardize(Dataset& d, const FeatureStats& stats) {
  for (Sample& s : d.samples) stats.apply(s.features);
}

// ---------------------------------------------------------------------------
// Inference

struct Predictions {
  std::vector<EventList> clips;  // clip-global frames
  EventList merged;              // all clips, consecutive frame ranges
  EventList merged_refs;
};

inline EventList predict_sample(const SeldModel& model, std::span<const float> theta, const Sample& s,
                                const DistanceScaler& scaler, const DecodeConfig& dc, int frame_offset) {
  if (s.silent) {
    EventList empty;
    empty.num_label_frames = frame_offset + static_cast<int>(model.config().output_frames());
    return empty;
  }
  DecodeOptions opt;
  opt.act_threshold = dc.act_threshold;
  opt.merge_deg = dc.merge_deg;
  opt.frame_offset = frame_offset;
  return decode_output(model.forward<float>(theta, s.features.tensor), scaler, opt);
}

/// Runs every segment, stitches clip-global frames, and lays clips end to
/// end so they can be scored together.
inline Predictions predict_dataset(const SeldModel& model, std::span<const float> theta, const Dataset& d,
                                   const DistanceScaler& scaler, const DecodeConfig& dc) {
  const int seg_frames = static_cast<int>(model.config().output_frames());
  Predictions p;
  p.clips.resize(d.clip_segments.size());
  for (std::size_t c = 0; c < p.clips.size(); ++c)
    p.clips[c].num_label_frames = static_cast<int>(d.clip_segments[c]) * seg_frames;
  for (const Sample& s : d.samples) {
    const EventList e = predict_sample(model, theta, s, scaler, dc, static_cast<int>(s.segment) * seg_frames);
    auto& dst = p.clips[s.clip].events;
    dst.insert(dst.end(), e.events.begin(), e.events.end());
  }
  int offset = 0;
  for (std::size_t c = 0; c < p.clips.size(); ++c) {
    sort_events(p.clips[c].events);
    for (Event e : p.clips[c].events) {
      e.frame += offset;
      p.merged.events.push_back(e);
    }
    if (c < d.clip_events.size())
      for (Event e : d.clip_events[c].events) {
        e.frame += offset;
        p.merged_refs.events.push_back(e);
      }
    offset += p.clips[c].num_label_frames;
  }
  p.merged.num_label_frames = p.merged_refs.num_label_frames = offset;
  return p;
}

inline SelddeMetrics score_dataset(const SeldModel& model, std::span<const float> theta, const Dataset& d,
                                   const DistanceScaler& scaler, const DecodeConfig& dc) {
  const Predictions p = predict_dataset(model, theta, d, scaler, dc);
  return compute_metrics(p.merged, p.merged_refs, static_cast<int>(model.config().classes));
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::string stage;  // "train" or "finetune"
  int epoch = 0;
  long step = 0;
  double lr = 0;
  double loss = 0;  // mean over the epoch's samples
  std::size_t real_samples = 0, synthetic_samples = 0;
  std::optional<SelddeMetrics> validation;
};

inline nlohmann::json to_json_record(const EpochRecord& r) {
  nlohmann::json j = {{"stage", r.stage},
                      {"epoch", r.epoch},
                      {"step", r.step},
                      {"lr", r.lr},
                      {"loss", r.loss},
                      {"real_samples", r.real_samples},
                      {"synthetic_samples", r.synthetic_samples}};
  if (r.validation) {
    j["f20"] = r.validation->f20;
    j["le_cd_deg"] = r.validation->le_cd_deg;
    j["rde_cd"] = r.validation->rde_cd;
    j["seldde_error"] = r.validation->seldde_error;
  }
  return j;
}

struct TrainResult {
  std::string checkpoint;
  SelddeMetrics best;
  std::string best_stage;
  int best_epoch = 0;
  std::vector<EpochRecord> log;
  std::vector<double> step_losses;
};

namespace detail {

struct Trainer {
  const TrainConfig& cfg;
  const SeldModel& model;
  const DistanceScaler& scaler;
  const FeatureStats& stats;
  const Dataset* validation;
  AlignedVector<float> theta;
  std::mt19937_64 shuffle_rng, aug_rng;
  TrainResult result;
  std::ofstream log;
  std::string best_path;
  bool have_best = false;

  LabeledFeatures prepare(const Sample& s) {
    const int C = static_cast<int>(model.config().classes);
    LabeledFeatures lf;
    if (cfg.augment.enabled && s.audio && s.source_tag == SourceTag::real &&
        std::bernoulli_distribution(cfg.augment.acs_probability)(aug_rng)) {
      const auto& all = all_acs_transforms();
      const auto t = all[std::uniform_int_distribution<std::size_t>(0, all.size() - 1)(aug_rng)];
      auto [clip, events] = acs_apply(*s.audio, s.events, t);
      lf.features = extract_salsa(clip, {}, &stats);
      lf.target = encode_labels<float>(events, scaler, C);
    } else {
      lf.features = s.features;
      lf.target = encode_labels<float>(s.events, scaler, C);
    }
    return lf;
  }

  LabeledFeatures augment(LabeledFeatures lf, const std::vector<Sample>& pool,
                          const std::vector<std::size_t>& ids, double magnitude) {
    const AugPolicy& p = cfg.augment;
    if (!p.enabled) return lf;
    if (ids.size() > 1 && std::bernoulli_distribution(p.mixup_probability * magnitude)(aug_rng)) {
      const auto j = ids[std::uniform_int_distribution<std::size_t>(0, ids.size() - 1)(aug_rng)];
      lf = mixup(lf, prepare(pool[j]), p.mixup_alpha, aug_rng);
    }
    lf.features = spec_augment(lf.features, p, magnitude, aug_rng);
    if (p.freq_shift_max > 0 && std::bernoulli_distribution(p.freq_shift_probability * magnitude)(aug_rng)) {
      const int lim = static_cast<int>(std::lround(p.freq_shift_max * magnitude));
      const int shift = std::uniform_int_distribution<int>(-lim, lim)(aug_rng);
      lf.features = freq_shift(lf.features, shift, p.freq_shift_max);
    }
    return lf;
  }

  void save(const std::string& path) {
    Checkpoint ck;
    ck.model = model.config();
    ck.scaler = scaler;
    ck.stats = stats;
    ck.weights = theta;
    ck.info = {{"decode", cfg.decode}, {"seed", cfg.seed}};
    save_checkpoint(path, ck);
  }

  void run_stage(const std::string& stage, const std::vector<Sample>& pool, const std::vector<std::size_t>& ids,
                 int epochs, double peak) {
    if (epochs == 0 || ids.empty()) return;
    const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
    const long per_epoch = static_cast<long>((ids.size() + B - 1) / B);
    const long total = per_epoch * epochs;
    const long warmup = cfg.warmup_steps > 0 ? cfg.warmup_steps
                                             : std::max(1L, std::lround(0.05 * static_cast<double>(total)));
    Adam<float> opt(theta.size());
    AlignedVector<float> grad(theta.size());
    std::vector<std::size_t> order = ids;
    long step = 0;
    for (int epoch = 1; epoch <= epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      EpochRecord rec;
      rec.stage = stage;
      rec.epoch = epoch;
      double loss_sum = 0;
      std::size_t count = 0;
      for (std::size_t b0 = 0; b0 < order.size(); b0 += B) {
        ++step;
        const double lr = lr_schedule(step, peak, warmup);
        const double magnitude = aug_magnitude(lr, peak, cfg.augment.magnitude_floor);
        const std::size_t b1 = std::min(order.size(), b0 + B);
        std::fill(grad.begin(), grad.end(), 0.0f);
        double batch_loss = 0;
        for (std::size_t i = b0; i < b1; ++i) {
          const Sample& s = pool[order[i]];
          (s.source_tag == SourceTag::real ? rec.real_samples : rec.synthetic_samples)++;
          LabeledFeatures lf = augment(prepare(s), pool, ids, magnitude);
          const auto targets = adpit_targets_from_tensor<float>(lf.target);
          ForwardTape<float> tape;
          const Tensor<float> out = model.forward<float>(theta, lf.features.tensor, tape);
          Tensor<float> d;
          const float loss = adpit_mse(out, targets, &d);
          if (!std::isfinite(loss))
            throw NumericError("non-finite loss in " + stage + " epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(step) + " (clip " + std::to_string(s.clip) + ", segment " +
                               std::to_string(s.segment) + ", lr " + std::to_string(lr) + ")");
          const float inv_b = 1.0f / static_cast<float>(b1 - b0);
          for (float& v : d.storage()) v *= inv_b;
          model.backward<float>(theta, tape, d, grad);
          batch_loss += loss;
        }
        for (float g : grad)
          if (!std::isfinite(g))
            throw NumericError("non-finite gradient in " + stage + " step " + std::to_string(step));
        opt.step(theta, grad, lr);
        result.step_losses.push_back(batch_loss / static_cast<double>(b1 - b0));
        loss_sum += batch_loss;
        count += b1 - b0;
        rec.lr = lr;
      }
      rec.step = step;
      rec.loss = loss_sum / static_cast<double>(count);
      const bool last = epoch == epochs;
      if (validation && (epoch % cfg.validate_every == 0 || last)) {
        rec.validation = score_dataset(model, theta, *validation, scaler, cfg.decode);
        if (!have_best || rec.validation->f20 > result.best.f20) {
          have_best = true;
          result.best = *rec.validation;
          result.best_stage = stage;
          result.best_epoch = epoch;
          save(best_path);
        }
      }
      log << to_json_record(rec).dump() << '\n';
      log.flush();
      result.log.push_back(std::move(rec));
    }
    if (!validation) {
      // no validation set: keep the latest weights
      have_best = true;
      result.best_stage = stage;
      result.best_epoch = epochs;
      save(best_path);
    }
  }

  AlignedVector<float> load_best() const { return load_checkpoint(best_path).weights; }
};

}  // namespace detail

/// Full schedule: training on synthetic + real data, then fine-tuning on
/// real recordings only, keeping the checkpoint with the best validation F20.
inline TrainResult train(const TrainConfig& cfg, const std::string& cache_dir = cache_dir_from_env()) {
  cfg.validate();
  const int C = static_cast<int>(cfg.model.classes);
  const bool keep_audio = cfg.augment.enabled && cfg.augment.acs_probability > 0;

  std::vector<Dataset> train_sets;
  for (const std::string& m : {cfg.train_synthetic, cfg.train_real})
    if (!m.empty()) train_sets.push_back(load_dataset(read_manifest(m, cfg.distance_unit), C, cache_dir, keep_audio));
  std::vector<Sample> pool;
  std::vector<EventList> train_events;
  for (Dataset& d : train_sets) {
    for (Sample& s : d.samples) pool.push_back(std::move(s));
    for (const EventList& e : d.clip_events) train_events.push_back(e);
  }
  if (pool.empty()) throw ConfigError("training manifests contain no audio");

  FeatureStatsAccumulator acc;
  for (const Sample& s : pool) acc.add(s.features);
  const FeatureStats stats = acc.finish();
  for (Sample& s : pool) stats.apply(s.features);
  const DistanceScaler scaler = fit_distance_scaler(train_events);

  std::optional<Dataset> val;
  if (!cfg.validation.empty()) {
    val = load_dataset(read_manifest(cfg.validation, cfg.distance_unit), C, cache_dir);
    standardize(*val, stats);
  }

  fs::create_directories(cfg.checkpoint_dir);
  const SeldModel model(cfg.model);
  detail::Trainer tr{cfg,
                     model,
                     scaler,
                     stats,
                     val ? &*val : nullptr,
                     model.init_weights<float>(),
                     seeded_rng(cfg.seed, 0, 0x5348),
                     seeded_rng(cfg.seed, 1, 0x4147),
                     {},
                     std::ofstream((fs::path(cfg.checkpoint_dir) / "run_log.jsonl").string()),
                     (fs::path(cfg.checkpoint_dir) / "best.ckpt").string()};
  if (!tr.log) throw IoError("cannot create run log in " + cfg.checkpoint_dir);

  std::vector<std::size_t> all(pool.size()), real;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    all[i] = i;
    if (pool[i].source_tag == SourceTag::real) real.push_back(i);
  }
  tr.run_stage("train", pool, all, cfg.epochs, cfg.peak_lr);
  if (cfg.finetune_epochs > 0 && !real.empty()) {
    if (tr.have_best) tr.theta = tr.load_best();
    tr.run_stage("finetune", pool, real, cfg.finetune_epochs, cfg.peak_lr * cfg.finetune_lr_ratio);
  }
  if (!tr.have_best) tr.save(tr.best_path);

  tr.result.checkpoint = tr.best_path;
  write_metrics_json((fs::path(cfg.checkpoint_dir) / "metrics.json").string(), tr.result.best);
  return std::move(tr.result);
}

struct LoadedModel {
  Checkpoint checkpoint;
  SeldModel model;
  DecodeConfig decode;

  explicit LoadedModel(const std::string& path)
      : checkpoint(load_checkpoint(path)), model(checkpoint.model) {
    if (checkpoint.info.contains("decode")) decode = checkpoint.info.at("decode").get<DecodeConfig>();
  }
};

/// Scores a checkpoint on a labeled manifest. Reads the checkpoint only.
inline SelddeMetrics evaluate(const std::string& checkpoint, const std::string& manifest,
                              const std::string& cache_dir = cache_dir_from_env(),
                              const std::string& distance_unit = "") {
  const LoadedModel lm(checkpoint);
  Dataset d = load_dataset(read_manifest(manifest, distance_unit), static_cast<int>(lm.model.config().classes), cache_dir);
  standardize(d, lm.checkpoint.stats);
  return score_dataset(lm.model, lm.checkpoint.weights, d, lm.checkpoint.scaler, lm.decode);
}

/// Detects events in one recording; frames are clip-global.
inline EventList infer(const std::string& checkpoint, const std::string& wav_path) {
  const LoadedModel lm(checkpoint);
  Manifest m;
  m.name = "infer";
  m.files.push_back({wav_path, "", SourceTag::real});
  Dataset d = load_dataset(m, static_cast<int>(lm.model.config().classes), "", false, false);
  standardize(d, lm.checkpoint.stats);
  return predict_dataset(lm.model, lm.checkpoint.weights, d, lm.checkpoint.scaler, lm.decode).clips.at(0);
}

// ---------------------------------------------------------------------------
// Scene sets and reports

/// Renders `count` scenes into `dir` with a manifest; returns its path.
inline std::string synth_dataset(const std::string& dir, const std::string& name, int count,
                                 const SceneConfig& base) {
  if (count < 1) throw ConfigError("scene count must be >= 1");
  base.validate();
  fs::create_directories(dir);
  Manifest m;
  m.name = name;
  m.extra = {{"seed", base.seed},
             {"config",
              {{"count", count},
               {"duration_s", base.duration_s},
               {"num_events", base.num_events},
               {"class_weights", base.class_weights},
               {"distance_range_m", {base.distance_range_m.first, base.distance_range_m.second}},
               {"elevation_range_deg", {base.elevation_range_deg.first, base.elevation_range_deg.second}},
               {"event_frames", {base.event_frames.first, base.event_frames.second}},
               {"max_polyphony", base.max_polyphony},
               {"snr_db", std::isfinite(base.snr_db) ? nlohmann::json(base.snr_db) : nlohmann::json("inf")}}}};
  for (int i = 0; i < count; ++i) {
    SceneConfig sc = base;
    sc.seed = base.seed + static_cast<std::uint64_t>(i);
    auto [clip, events] = synth_scene(sc);
    std::ostringstream stem;
    stem << name << '_' << std::setw(4) << std::setfill('0') << i;
    const fs::path wav = fs::path(dir) / (stem.str() + ".wav");
    const fs::path csv = fs::path(dir) / (stem.str() + ".csv");
    save_foa_wav(wav.string(), clip);
    write_metadata_csv(csv.string(), events);
    m.files.push_back({wav.string(), csv.string(), SourceTag::synthetic});
  }
  const std::string path = (fs::path(dir) / "manifest.json").string();
  write_manifest(path, m);
  return path;
}

inline std::vector<double> histogram_edges(double max_m, double width) {
  if (!(width > 0) || !(max_m > 0)) throw ConfigError("histogram range and bin width must be positive");
  std::vector<double> edges;
  const auto n = static_cast<std::size_t>(std::ceil(max_m / width - 1e-9));
  for (std::size_t i = 0; i <= n; ++i) edges.push_back(static_cast<double>(i) * width);
  return edges;
}

/// Distances of every labeled event of a manifest.
inline EventList manifest_events(const Manifest& m) {
  EventList all;
  for (const auto& f : m.files) {
    if (f.metadata.empty()) continue;
    const EventList e = read_metadata_csv(f.metadata, m.distance_scale());
    all.events.insert(all.events.end(), e.events.begin(), e.events.end());
  }
  return all;
}

namespace detail {

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  return colors[i % 6];
}

inline std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

/// Density-normalized step histograms, one polyline per dataset.
inline void write_histogram_svg(const std::string& path, const std::vector<double>& edges,
                                const std::vector<std::pair<std::string, std::vector<std::size_t>>>& series) {
  const double W = 640, H = 400, L = 60, R = 20, T = 20, Bm = 50;
  const double pw = W - L - R, ph = H - T - Bm;
  const double xmax = edges.back();
  std::vector<std::vector<double>> dens;
  double ymax = 0;
  for (const auto& [name, counts] : series) {
    double total = 0;
    for (auto c : counts) total += static_cast<double>(c);
    std::vector<double> d(counts.size(), 0.0);
    for (std::size_t i = 0; i < counts.size(); ++i) {
      const double w = edges[i + 1] - edges[i];
      d[i] = total > 0 ? static_cast<double>(counts[i]) / (total * w) : 0.0;
      ymax = std::max(ymax, d[i]);
    }
    dens.push_back(std::move(d));
  }
  if (ymax <= 0) ymax = 1;
  const auto X = [&](double x) { return L + pw * x / xmax; };
  const auto Y = [&](double y) { return T + ph * (1.0 - y / (ymax * 1.05)); };

  std::ofstream out(path);
  if (!out) throw IoError("cannot create " + path);
  out << std::fixed << std::setprecision(2);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T + ph << "\" x2=\"" << L + pw << "\" y2=\"" << T + ph
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << T + ph << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= static_cast<int>(std::floor(xmax)); ++i)
    out << "<text x=\"" << X(i) << "\" y=\"" << T + ph + 18 << "\" font-size=\"12\" text-anchor=\"middle\">" << i
        << "</text>\n";
  out << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 10
      << "\" font-size=\"13\" text-anchor=\"middle\">distance (m)</text>\n";
  out << "<text x=\"15\" y=\"" << T + ph / 2 << "\" font-size=\"13\" transform=\"rotate(-90 15 " << T + ph / 2
      << ")\" text-anchor=\"middle\">density</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    out << "<polyline fill=\"none\" stroke-width=\"2\" stroke=\"" << detail::palette(s) << "\" points=\"";
    out << X(edges[0]) << ',' << Y(0) << ' ';
    for (std::size_t i = 0; i < dens[s].size(); ++i)
      out << X(edges[i]) << ',' << Y(dens[s][i]) << ' ' << X(edges[i + 1]) << ',' << Y(dens[s][i]) << ' ';
    out << X(edges.back()) << ',' << Y(0) << "\"/>\n";
    const double ly = T + 15 + 18 * static_cast<double>(s);
    out << "<line x1=\"" << L + pw - 150 << "\" y1=\"" << ly << "\" x2=\"" << L + pw - 125 << "\" y2=\"" << ly
        << "\" stroke-width=\"2\" stroke=\"" << detail::palette(s) << "\"/>\n";
    out << "<text class=\"legend\" x=\"" << L + pw - 120 << "\" y=\"" << ly + 4 << "\" font-size=\"12\">"
        << detail::svg_escape(series[s].first) << "</text>\n";
  }
  out << "</svg>\n";
}

struct ReportOutputs {
  std::vector<std::string> files;
};

/// Distance histograms per manifest (CSV + SVG), an overlaid comparison when
/// more than one manifest is given, and a metrics summary table.
inline ReportOutputs report(const std::vector<std::string>& manifests, const std::string& out_dir,
                            const std::vector<std::string>& metrics_files = {}, double max_m = 8.0,
                            double bin_width = 0.25, const std::string& distance_unit = "") {
  fs::create_directories(out_dir);
  const auto edges = histogram_edges(max_m, bin_width);
  ReportOutputs r;
  std::vector<std::pair<std::string, std::vector<std::size_t>>> all;
  for (const std::string& mp : manifests) {
    const Manifest m = read_manifest(mp, distance_unit);
    const auto counts = distance_histogram(manifest_events(m), edges);
    const std::string stem = (fs::path(out_dir) / ("distance_hist_" + m.name)).string();
    {
      std::ofstream csv(stem + ".csv");
      if (!csv) throw IoError("cannot create " + stem + ".csv");
      csv << "bin_lo_m,bin_hi_m,count\n";
      for (std::size_t i = 0; i < counts.size(); ++i)
        csv << detail::format_number(edges[i]) << ',' << detail::format_number(edges[i + 1]) << ',' << counts[i] << '\n';
    }
    write_histogram_svg(stem + ".svg", edges, {{m.name, counts}});
    r.files.push_back(stem + ".csv");
    r.files.push_back(stem + ".svg");
    all.emplace_back(m.name, counts);
  }
  if (all.size() > 1) {
    const std::string p = (fs::path(out_dir) / "distance_hist_comparison.svg").string();
    write_histogram_svg(p, edges, all);
    r.files.push_back(p);
  }
  if (!metrics_files.empty()) {
    const std::string p = (fs::path(out_dir) / "metrics_summary.csv").string();
    std::ofstream csv(p);
    if (!csv) throw IoError("cannot create " + p);
    csv << "system,f20,le_cd_deg,rde_cd,seldde_error\n";
    for (const std::string& mf : metrics_files) {
      std::ifstream in(mf);
      if (!in) throw IoError("cannot open " + mf);
      nlohmann::json j;
      try {
        in >> j;
        csv << fs::path(mf).stem().string() << ',' << detail::format_number(j.at("f20").get<double>()) << ','
            << detail::format_number(j.at("le_cd_deg").get<double>()) << ',' << detail::format_number(j.at("rde_cd").get<double>())
            << ',' << detail::format_number(j.at("seldde_error").get<double>()) << '\n';
      } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad metrics file " + mf + ": " + e.what());
      }
    }
    r.files.push_back(p);
  }
  return r;
}

}  // namespace seldde

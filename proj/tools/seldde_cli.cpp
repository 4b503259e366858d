// Command-line front end for the seldde toolkit.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "seldde/seldde.hpp"

namespace fs = std::filesystem;
using namespace seldde;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUser = 1;
constexpr int kExitInternal = 2;

std::string resolve_cache(const std::string& flag) { return flag.empty() ? cache_dir_from_env() : flag; }

void write_json(const std::string& path, const nlohmann::json& j) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot create " + path);
  out << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sound event localization, detection and distance estimation toolkit", "seldde"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  // synth
  auto* synth = app.add_subcommand("synth", "render synthetic FOA scenes with metadata and a manifest");
  std::string synth_out, synth_name = "synth";
  int synth_count = 8, synth_classes = 13;
  SceneConfig scene;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--name", synth_name, "dataset name");
  synth->add_option("--count", synth_count, "number of scenes")->check(CLI::PositiveNumber);
  synth->add_option("--classes", synth_classes, "number of classes")->check(CLI::PositiveNumber);
  synth->add_option("--events", scene.num_events, "events per scene");
  synth->add_option("--duration", scene.duration_s, "scene length in seconds");
  synth->add_option("--max-polyphony", scene.max_polyphony, "polyphony cap");
  synth->add_option("--min-distance", scene.distance_range_m.first, "meters");
  synth->add_option("--max-distance", scene.distance_range_m.second, "meters");
  synth->add_option("--snr", scene.snr_db, "signal-to-noise ratio in dB");
  synth->add_option("--seed", scene.seed, "seed of the first scene");

  // extract
  auto* extract = app.add_subcommand("extract", "compute SALSA features into the feature cache");
  std::string extract_manifest, extract_cache;
  int extract_classes = 13;
  extract->add_option("--manifest", extract_manifest)->required();
  extract->add_option("--cache-dir", extract_cache, std::string("defaults to $") + kCacheDirEnv);
  extract->add_option("--classes", extract_classes)->check(CLI::PositiveNumber);

  // fit-scaler
  auto* fit = app.add_subcommand("fit-scaler", "fit the distance scaler on training metadata");
  std::vector<std::string> fit_manifests;
  std::string fit_out;
  fit->add_option("--manifest", fit_manifests)->required();
  fit->add_option("--out", fit_out, "scaler JSON path (stdout if omitted)");

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model from a JSON config");
  std::string train_config, train_cache;
  bool train_det = false;
  train_cmd->add_option("--config", train_config)->required();
  train_cmd->add_option("--cache-dir", train_cache);
  train_cmd->add_flag("--deterministic", train_det, "single-stream data loading");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "score a checkpoint on a labeled manifest");
  std::string eval_ckpt, eval_manifest, eval_out, eval_cache;
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--manifest", eval_manifest)->required();
  eval->add_option("--out", eval_out, "metrics JSON path (stdout if omitted)");
  eval->add_option("--cache-dir", eval_cache);

  // infer
  auto* inf = app.add_subcommand("infer", "detect events in a 4-channel FOA recording");
  std::string inf_ckpt, inf_wav, inf_out;
  inf->add_option("--checkpoint", inf_ckpt)->required();
  inf->add_option("--wav", inf_wav)->required();
  inf->add_option("--out", inf_out, "prediction CSV path (stdout if omitted)");

  // report
  auto* rep = app.add_subcommand("report", "distance histograms and metric tables");
  std::vector<std::string> rep_manifests, rep_metrics;
  std::string rep_out;
  double rep_max = 8.0, rep_width = 0.25;
  rep->add_option("--manifest", rep_manifests)->required();
  rep->add_option("--metrics", rep_metrics, "metrics JSON files for the summary table");
  rep->add_option("--out", rep_out)->required();
  rep->add_option("--max-distance", rep_max);
  rep->add_option("--bin-width", rep_width);

  std::string unit;
  for (auto* sub : {extract, fit, train_cmd, eval, rep})
    sub->add_option("--distance-unit", unit, "unit of metadata distances")->check(CLI::IsMember({"m", "cm"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUser;
  }

  try {
    if (*synth) {
      scene.class_weights.assign(static_cast<std::size_t>(synth_classes), 1.0 / synth_classes);
      std::cout << synth_dataset(synth_out, synth_name, synth_count, scene) << '\n';
    } else if (*extract) {
      const std::string cache = resolve_cache(extract_cache);
      if (cache.empty()) throw ConfigError(std::string("no cache directory: pass --cache-dir or set ") + kCacheDirEnv);
      const Dataset d = load_dataset(read_manifest(extract_manifest, unit), extract_classes, cache, false, false);
      std::cout << d.samples.size() << " segments cached in " << cache << '\n';
    } else if (*fit) {
      std::vector<EventList> lists;
      for (const auto& m : fit_manifests) lists.push_back(manifest_events(read_manifest(m, unit)));
      write_json(fit_out, fit_distance_scaler(lists));
    } else if (*train_cmd) {
      TrainConfig cfg = read_train_config(train_config);
      if (train_det) cfg.deterministic = true;
      if (!unit.empty()) cfg.distance_unit = unit;
      const TrainResult r = train(cfg, resolve_cache(train_cache));
      std::cout << r.checkpoint << '\n' << metrics_to_json(r.best).dump(2) << '\n';
    } else if (*eval) {
      write_json(eval_out, metrics_to_json(evaluate(eval_ckpt, eval_manifest, resolve_cache(eval_cache), unit)));
    } else if (*inf) {
      const EventList events = infer(inf_ckpt, inf_wav);
      if (inf_out.empty() || inf_out == "-")
        write_metadata_csv(std::cout, events);
      else
        write_metadata_csv(inf_out, events);
    } else if (*rep) {
      for (const auto& f : report(rep_manifests, rep_out, rep_metrics, rep_max, rep_width, unit).files)
        std::cout << f << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "seldde: " << e.what() << '\n';
    return e.user_facing() ? kExitUser : kExitInternal;
  } catch (const std::exception& e) {
    std::cerr << "seldde: internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitOk;
}

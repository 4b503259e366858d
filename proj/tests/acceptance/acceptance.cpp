// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails. Pass criterion numbers as arguments to
// run a subset.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "seldde/seldde.hpp"
#include "../test_support.hpp"

using namespace seldde;
using seldde::testing::angle_diff;
using seldde::testing::ls_doa;
using seldde::testing::mean_direction;
using seldde::testing::plane_wave;
using seldde::testing::TempDir;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      if (pass) detail << "failed: ";
      else detail << "; ";
      detail << what;
      pass = false;
    }
  }
};

EventList list(std::vector<Event> e) {
  EventList l;
  l.events = std::move(e);
  return l;
}

// 1. Aggregated error on reference metric triples.
void criterion_1(Outcome& o) {
  struct Row {
    double f, le, rde, want;
  };
  const Row rows[] = {
      {0.131, 36.9, 0.330, 0.468}, {0.136, 33.2, 0.310, 0.453}, {0.150, 29.4, 0.273, 0.429},
      {0.159, 25.5, 0.316, 0.433}, {0.168, 21.1, 0.310, 0.420},
      {0.131, 36.9, 0.330, 0.468}, {0.190, 29.1, 0.306, 0.426}, {0.339, 20.4, 0.304, 0.359},
      {0.338, 21.4, 0.300, 0.360}, {0.327, 22.9, 0.301, 0.367}, {0.327, 20.6, 0.311, 0.366},
  };
  double worst = 0;
  for (const Row& r : rows) {
    const double got = seldde_error(r.f, r.le, r.rde);
    worst = std::max(worst, std::abs(got - r.want));
    o.check(std::abs(got - r.want) <= 0.0015, "row (" + std::to_string(r.f) + ", " + std::to_string(r.le) + ", " +
                                                  std::to_string(r.rde) + ") -> " + std::to_string(got));
  }
  o.detail << (o.pass ? "" : " ") << "11 rows, max |diff| " << worst;
}

// 2. Distance scaling round trip and range.
void criterion_2(Outcome& o) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.04, 7.64);
  std::vector<double> d(100000);
  for (double& v : d) {
    do v = u(rng);
    while (v <= 0.04);
  }
  const DistanceScaler s = fit_distance_scaler(d);
  double worst = 0;
  bool in_range = true;
  for (double v : d) {
    const double x = s.scale(v);
    in_range = in_range && x >= -1.0 && x <= 1.0;
    worst = std::max(worst, std::abs(s.unscale(x) - v) / v);
  }
  o.check(worst < 1e-9, "round trip relative error " + std::to_string(worst));
  o.check(in_range, "scaled value outside [-1, 1]");
  const DistanceScaler f = fit_distance_scaler(std::vector<double>{1, 2, 3});
  const double a = f.scale(1), b = f.scale(2), c = f.scale(3);
  o.check(std::abs(a + 1) < 1e-12 && std::abs(b) < 1e-12 && std::abs(c - 1) < 1e-12,
          "{1,2,3} -> {" + std::to_string(a) + ", " + std::to_string(b) + ", " + std::to_string(c) + "}");
  o.detail << (o.pass ? "" : " ") << "1e5 distances, max relative round-trip error " << worst;
}

std::vector<double> channel_energies(const FoaClip& c) {
  std::vector<double> e(kNumFoaChannels, 0.0);
  for (std::size_t ch = 0; ch < kNumFoaChannels; ++ch)
    for (std::size_t t = 0; t < c.num_samples(); ++t) {
      const double v = c.channel(ch)[t];
      e[ch] += v * v;
    }
  return e;
}

// 3. Channel swapping against waveform re-estimated directions.
void criterion_3(Outcome& o) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> az(-180, 180), el(-80, 80);
  const auto transforms = all_acs_transforms();
  o.check(transforms.size() == 16, "expected 16 transforms");
  double worst = 0;
  std::size_t energy_bad = 0, n = 0;
  for (int i = 0; i < 50; ++i) {
    const auto [clip, ev] = plane_wave(az(rng), el(rng), 1.0, i % 13, 13, 300 + i);
    auto before = channel_energies(clip);
    std::sort(before.begin(), before.end());
    for (const auto& t : transforms) {
      const auto [out, lab] = acs_apply(clip, ev, t);
      const auto doa = ls_doa(out);
      const Event& e = lab.events.front();
      const double err = angular_error(doa[0], doa[1], e.azimuth_deg, e.elevation_deg);
      worst = std::max(worst, err);
      auto after = channel_energies(out);
      std::sort(after.begin(), after.end());
      // Channel energies are a permutation, so the totals agree when summed
      // in the same order.
      if (after != before || std::accumulate(after.begin(), after.end(), 0.0) !=
                                 std::accumulate(before.begin(), before.end(), 0.0))
        ++energy_bad;
      ++n;
    }
  }
  o.check(worst <= 0.1, "max DOA error " + std::to_string(worst) + " deg");
  o.check(energy_bad == 0, std::to_string(energy_bad) + " transforms changed the energy");
  o.detail << (o.pass ? "" : " ") << n << " transformed clips, max DOA error " << worst << " deg";
}

using Row4 = std::array<double, kTargetComponents>;

double brute_adpit(const Tensor<double>& pred, const std::vector<std::vector<std::vector<Row4>>>& events) {
  const std::size_t F = pred.dim(0), C = pred.dim(2);
  double total = 0;
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t c = 0; c < C; ++c) {
      const auto& ev = events[f][c];
      const auto score = [&](const std::array<int, 3>& idx) {
        double s = 0;
        for (std::size_t k = 0; k < 3; ++k)
          for (std::size_t i = 0; i < 4; ++i) {
            const double want = idx[k] < 0 ? 0.0 : ev[static_cast<std::size_t>(idx[k])][i];
            s += (pred(f, k, c, i) - want) * (pred(f, k, c, i) - want);
          }
        return s / 12;
      };
      double best = 1e300;
      if (ev.empty()) best = score({-1, -1, -1});
      // every map from tracks to events that uses each event at least once
      const int A = static_cast<int>(ev.size());
      for (int a = 0; a < A; ++a)
        for (int b = 0; b < A; ++b)
          for (int d = 0; d < A; ++d) {
            std::set<int> hit{a, b, d};
            if (static_cast<int>(hit.size()) == A) best = std::min(best, score({a, b, d}));
          }
      total += best;
    }
  return total / static_cast<double>(F * C);
}

// 4. Permutation-invariant loss against exhaustive search.
void criterion_4(Outcome& o) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1, 1);
  std::uniform_int_distribution<int> active(0, 3);
  double worst = 0;
  std::size_t perm_bad = 0;
  for (int trial = 0; trial < 200; ++trial) {
    Tensor<double> pred(Shape{2, 3, 2, 4}), target(Shape{2, 3, 2, 4});
    for (double& v : pred.values()) v = u(rng);
    std::vector<std::vector<std::vector<Row4>>> events(2, std::vector<std::vector<Row4>>(2));
    for (std::size_t f = 0; f < 2; ++f)
      for (std::size_t c = 0; c < 2; ++c) {
        const int a = active(rng);
        for (int k = 0; k < a; ++k) {
          Row4 r{u(rng), u(rng), u(rng), u(rng)};
          events[f][c].push_back(r);
          for (std::size_t i = 0; i < 4; ++i) target(f, static_cast<std::size_t>(k), c, i) = r[i];
        }
      }
    const auto targets = adpit_targets_from_tensor<double>(target);
    const double loss = adpit_mse(pred, targets);
    worst = std::max(worst, std::abs(loss - brute_adpit(pred, events)));

    std::array<std::size_t, 3> perm{0, 1, 2};
    while (std::next_permutation(perm.begin(), perm.end())) {
      Tensor<double> p(pred.shape());
      for (std::size_t f = 0; f < 2; ++f)
        for (std::size_t k = 0; k < 3; ++k)
          for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t i = 0; i < 4; ++i) p(f, perm[k], c, i) = pred(f, k, c, i);
      if (adpit_mse(p, targets) != loss) ++perm_bad;
    }
  }
  o.check(worst <= 1e-12, "max deviation from brute force " + std::to_string(worst));
  o.check(perm_bad == 0, std::to_string(perm_bad) + " track permutations changed the loss");
  o.detail << (o.pass ? "" : " ") << "200 tensors, max |loss - brute| " << worst << ", permutations exact";
}

// 5. Feature map contract.
void criterion_5(Outcome& o) {
  SceneConfig sc;
  sc.seed = 5;
  const FeatureMap any = extract_salsa(synth_scene(sc).first);
  o.check(any.tensor.shape() == Shape({7, 400, 200}), "shape " + shape_string(any.tensor.shape()));

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> az(-180, 180), el(-60, 60);
  double worst = 0;
  for (int i = 0; i < 5; ++i) {
    const double a = az(rng), e = el(rng);
    const FeatureMap f = extract_salsa(plane_wave(a, e, 1.0, i, 13, 500 + i).first);
    o.check(f.tensor.shape() == Shape({7, 400, 200}), "plane wave shape");
    Tensor<float> sp(Shape{3, 400, 200});
    std::copy(f.tensor.data() + 4 * 400 * 200, f.tensor.data() + f.tensor.size(), sp.data());
    std::size_t used = 0;
    const auto doa = mean_direction(sp, 0, 0, 0, &used);
    o.check(used > 0, "no gated-in bins");
    worst = std::max(worst, angular_error(doa[0], doa[1], a, e));
  }
  o.check(worst <= 2.0, "direction error " + std::to_string(worst) + " deg");

  Tensor<double> c(Shape{3, 257});
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t f = 0; f < 257; ++f) c(r, f) = -2.5 + static_cast<double>(r);
  const auto y = compress_high_freq(c);
  bool constant = y.shape() == Shape({3, 200});
  for (std::size_t r = 0; r < 3 && constant; ++r)
    for (std::size_t f = 0; f < 200; ++f) constant = constant && y(r, f) == -2.5 + static_cast<double>(r);
  o.check(constant, "compress_high_freq changed a constant row");
  o.detail << (o.pass ? "" : " ") << "shape (7, 400, 200), max plane-wave direction error " << worst << " deg";
}

ModelConfig tiny_config(Variant v) {
  ModelConfig mc;
  mc.stage_channels = {8, 8, 8, 8};
  mc.conformer_layers = 1;
  mc.d_model = 16;
  mc.attention_heads = 2;
  mc.conv_kernel = 5;
  mc.classes = 2;
  mc.input_frames = 16;
  mc.input_bins = 32;
  mc.variant = v;
  return mc;
}

Tensor<double> random_map(Shape s, std::uint64_t seed, double scale = 1.0) {
  Tensor<double> x(std::move(s));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : x.values()) v = n(rng);
  return x;
}

// 6. Model contracts.
void criterion_6(Outcome& o) {
  const SeldModel toy(ModelConfig::toy(13));
  const auto theta = toy.init_weights<float>(6);
  Tensor<float> x(Shape{7, 400, 200});
  std::mt19937_64 rng(6);
  std::normal_distribution<float> n;
  for (float& v : x.values()) v = n(rng);
  const auto y = toy.forward<float>(theta, x);
  o.check(y.shape() == Shape({50, 3, 13, 4}), "output shape " + shape_string(y.shape()));
  o.check(std::all_of(y.values().begin(), y.values().end(), [](float v) { return v > -1.0f && v < 1.0f; }),
          "output outside (-1, 1)");

  const auto count = [](Variant v) {
    ModelConfig c = ModelConfig::toy();
    c.variant = v;
    return SeldModel(c).num_parameters();
  };
  const ModelConfig tc = ModelConfig::toy();
  const std::size_t tail = scse_parameter_count(tc.stage_channels.back(), tc.se_reduction);
  std::size_t blocks = 0;
  for (std::size_t s = 0; s < tc.stage_channels.size(); ++s)
    blocks += tc.blocks_per_stage[s] * scse_parameter_count(tc.stage_channels[s], tc.se_reduction);
  const std::size_t stem_sse = tc.stage_channels.front() + 1;
  o.check(count(Variant::A) - count(Variant::B) == tail, "A - B is not the tail SCSE");
  o.check(count(Variant::A) - count(Variant::C) == blocks, "A - C is not the residual-block SCSEs");
  o.check(count(Variant::C) - count(Variant::D) == stem_sse + tail, "C - D is not stem sSE + tail SCSE");

  const auto p = random_map({3, 4, 12}, 61);
  const auto pooled = nn::avgmax_pool_last(p);
  double pool_err = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 4; ++t) {
      double sum = 0, mx = -1e300;
      for (std::size_t f = 0; f < 12; ++f) {
        sum += p(c, t, f);
        mx = std::max(mx, p(c, t, f));
      }
      pool_err = std::max(pool_err, std::abs(pooled(c, t) - (sum / 12 + mx)));
    }
  o.check(pool_err <= 1e-12, "AvgMaxPool identity off by " + std::to_string(pool_err));

  double worst_rel = 0;
  std::size_t checked = 0, significant = 0;
  for (Variant v : {Variant::A, Variant::B, Variant::C, Variant::D}) {
    const SeldModel m(tiny_config(v));
    const auto th = m.init_weights<double>(7);
    const auto in = random_map({7, 16, 32}, 1);
    const auto cands = adpit_targets_from_tensor<double>(random_map(m.output_shape(), 2, 0.5));
    ForwardTape<double> tape;
    const auto out = m.forward<double>(th, in, tape);
    Tensor<double> d_out;
    adpit_mse(out, cands, &d_out);
    std::vector<double> grad(th.size(), 0.0);
    m.backward<double>(th, tape, d_out, grad);
    const auto loss_at = [&](std::size_t i, double delta) {
      auto t = th;
      t[i] += delta;
      return adpit_mse(m.forward<double>(t, in), cands);
    };
    std::mt19937_64 pick_rng(static_cast<std::uint64_t>(v) + 100);
    std::uniform_int_distribution<std::size_t> pick(0, th.size() - 1);
    const double h = 1e-6;
    for (int k = 0; k < 20; ++k) {
      const std::size_t i = pick(pick_rng);
      const double fd = (loss_at(i, h) - loss_at(i, -h)) / (2 * h);
      const double err = std::abs(fd - grad[i]);
      const double scale = std::max(std::abs(fd), std::abs(grad[i]));
      // Gradients below the finite-difference roundoff floor are compared absolutely.
      const bool ok = err <= 1e-4 * scale || err < 1e-9;
      if (scale > 1e-7) {
        worst_rel = std::max(worst_rel, err / scale);
        ++significant;
      }
      o.check(ok, to_string(v) + " param " + std::to_string(i) + " fd " + std::to_string(fd) + " analytic " +
                      std::to_string(grad[i]));
      ++checked;
    }
  }
  o.detail << (o.pass ? "" : " ") << "shape (50, 3, 13, 4), variant deltas exact, " << checked
           << " gradient entries, max relative error " << worst_rel << " over the " << significant
           << " with |g| > 1e-7";
}

// 7. Metric fixtures.
void criterion_7(Outcome& o) {
  const EventList refs = list({{0, 0, 0, 10, 5, 2}, {1, 2, 0, -40, 0, 3}, {1, 2, 1, 60, 20, 1}});
  const auto perfect = compute_metrics(refs, refs, 3);
  o.check(perfect.f20 == 1.0 && std::abs(perfect.le_cd_deg) < 1e-5 && perfect.rde_cd == 0.0 &&
              std::abs(perfect.seldde_error) < 1e-7,
          "perfect fixture");

  const auto single = compute_metrics(list({{0, 0, 0, 10, 0, 3}}), list({{0, 0, 0, 0, 0, 2}}), 13);
  o.check(single.f20 == 1.0 && std::abs(single.le_cd_deg - 10.0) < 1e-9 && std::abs(single.rde_cd - 0.5) < 1e-12,
          "single pair gives (" + std::to_string(single.f20) + ", " + std::to_string(single.le_cd_deg) + ", " +
              std::to_string(single.rde_cd) + ")");

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> az(-180, 180), el(-60, 60), d(0.5, 5), jitter(-15, 15), k(0.1, 10);
  std::uniform_int_distribution<int> cls(0, 3);
  EventList r, p;
  for (int f = 0; f < 40; ++f)
    for (int s = 0; s < 2; ++s) {
      const Event e{f, cls(rng), s, az(rng), el(rng), d(rng)};
      r.events.push_back(e);
      if ((f + s) % 3)
        p.events.push_back({f, e.class_idx, s, wrap_azimuth(e.azimuth_deg + jitter(rng)), e.elevation_deg,
                            e.distance_m * 1.3});
    }
  const double base = compute_metrics(p, r, 4).rde_cd;
  for (int i = 0; i < 5; ++i) {
    const double factor = k(rng);
    EventList ps = p, rs = r;
    for (Event& e : ps.events) e.distance_m *= factor;
    for (Event& e : rs.events) e.distance_m *= factor;
    o.check(std::abs(compute_metrics(ps, rs, 4).rde_cd - base) < 1e-12, "RDE changed under scaling");
  }

  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    EventList a, b;
    for (int s = 0; s < 2; ++s) {
      a.events.push_back({0, 0, s, az(rng), el(rng), 1});
      b.events.push_back({0, 0, s, az(rng), el(rng), 1});
    }
    const auto m = match_events(a, b);
    double total = 0;
    for (const auto& pr : m.pairs) total += pr.angle_deg;
    const auto cost = [&](std::size_t i, std::size_t j) { return angular_error(a.events[i], b.events[j]); };
    const double oracle = std::min(cost(0, 0) + cost(1, 1), cost(0, 1) + cost(1, 0));
    if (m.pairs.size() != 2 || std::abs(total - oracle) > 1e-9) ++mismatches;
  }
  o.check(mismatches == 0, std::to_string(mismatches) + " of 1000 2x2 assignments differ from exhaustive search");
  o.detail << (o.pass ? "" : " ") << "perfect (1, 0, 0, 0), single pair (1, 10, 0.5), RDE scale-invariant, "
           << "1000 2x2 assignments optimal";
}

struct OverfitRun {
  TrainResult result;
  AlignedVector<float> weights;
};

OverfitRun overfit_run(const std::string& manifest, const std::string& dir) {
  TrainConfig cfg;
  cfg.epochs = 150;
  cfg.finetune_epochs = 0;
  cfg.batch_size = 1;
  cfg.peak_lr = 2e-3;
  cfg.warmup_steps = 100;
  cfg.seed = 1;
  cfg.deterministic = true;
  cfg.validate_every = 25;
  cfg.train_synthetic = manifest;
  cfg.validation = manifest;
  cfg.model = ModelConfig::toy(4);
  cfg.augment.enabled = false;
  cfg.decode.merge_deg = 15.0;
  cfg.checkpoint_dir = dir + "/ckpt";
  OverfitRun run;
  run.result = train(cfg, dir + "/cache");
  run.weights = load_checkpoint(run.result.checkpoint).weights;
  return run;
}

// 8. End-to-end overfit and reproducibility.
void criterion_8(Outcome& o) {
  TempDir dir("acceptance");
  SceneConfig sc;
  sc.class_weights = std::vector<double>(4, 0.25);
  sc.max_polyphony = 2;
  sc.num_events = 3;
  sc.seed = 100;
  const std::string manifest = synth_dataset(dir / "data", "overfit", 8, sc);

  const OverfitRun a = overfit_run(manifest, dir / "run_a");
  const OverfitRun b = overfit_run(manifest, dir / "run_b");
  const SelddeMetrics& m = a.result.best;
  const std::size_t steps = a.result.step_losses.size();
  o.check(steps <= 2000, std::to_string(steps) + " steps");
  o.check(m.f20 >= 0.8, "F20 " + std::to_string(m.f20));
  o.check(m.rde_cd <= 0.3, "RDE " + std::to_string(m.rde_cd));
  o.check(a.result.step_losses == b.result.step_losses, "step losses differ between runs");
  o.check(a.weights == b.weights, "best weights differ between runs");
  o.check(metrics_to_json(a.result.best) == metrics_to_json(b.result.best), "metrics differ between runs");
  const bool same = a.result.step_losses == b.result.step_losses && a.weights == b.weights;
  o.detail << (o.pass ? "" : " ") << steps << " steps, F20 " << m.f20 << ", LE " << m.le_cd_deg << " deg, RDE "
           << m.rde_cd << (same ? ", second run bit-identical" : ", second run differs");
}

// 9. Schedules.
void criterion_9(Outcome& o) {
  for (long w : {1L, 100L, 4000L, 12345L}) {
    o.check(lr_schedule(w, 5e-4, w) == 5e-4, "lr at warmup " + std::to_string(w));
    if (w > 1) o.check(lr_schedule(w - 1, 5e-4, w) < 5e-4, "lr below peak before warmup");
    o.check(lr_schedule(w + 1, 5e-4, w) < 5e-4, "lr below peak after warmup");
  }
  o.check(aug_magnitude(5e-4, 5e-4) == 1.0, "magnitude at peak");
  o.check(aug_magnitude(0.0, 5e-4) == 0.1, "magnitude at lr 0");
  o.check(aug_magnitude(1e-12, 5e-4) == 0.1, "magnitude at tiny lr");
  o.check(aug_magnitude(0.0, 5e-4, 0.25) == 0.25, "custom floor");
  o.detail << (o.pass ? "" : " ") << "lr peak exactly 5e-4 at warmup, magnitude 1.0 at peak and floor as lr -> 0";
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<void(Outcome&)>> criteria{criterion_1, criterion_2, criterion_3,
                                                            criterion_4, criterion_5, criterion_6,
                                                            criterion_7, criterion_8, criterion_9};
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      criteria[i](o);
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s criterion %d: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, o.detail.str().c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}

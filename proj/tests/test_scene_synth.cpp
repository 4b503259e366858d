#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "seldde/scene_synth.hpp"
#include "test_support.hpp"

using namespace seldde;

TEST(EncodeFoaGains, AxisDirections) {
  const auto expect = [](std::array<double, 4> g, std::array<double, 4> want) {
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(g[i], want[i], 1e-12) << i;
  };
  expect(encode_foa_gains(0, 0), {1, 0, 0, 1});
  expect(encode_foa_gains(90, 0), {1, 1, 0, 0});
  expect(encode_foa_gains(0, 90), {1, 0, 1, 0});
}

TEST(SynthScene, NoEventsIsNoiseOnly) {
  SceneConfig cfg;
  cfg.num_events = 0;
  cfg.seed = 4;
  const auto [clip, events] = synth_scene(cfg);
  EXPECT_TRUE(events.empty());
  double energy = 0;
  for (float v : clip.samples.values()) energy += double(v) * v;
  EXPECT_GT(energy, 0.0);
  EXPECT_EQ(clip.num_samples(), 5u * 24000u);
}

TEST(SynthScene, ChannelEnergyRatiosFollowGains) {
  SceneLayout layout;
  layout.snr_db = 60;
  layout.seed = 11;
  layout.events.push_back({2, 0, 10, 20, 30.0, 0.0, 1.0});
  const auto [clip, events] = render_scene(layout);
  const auto g = encode_foa_gains(30, 0);
  const std::size_t begin = 10 * kSamplesPerLabelFrame, end = 30 * kSamplesPerLabelFrame;
  std::array<double, 4> e{};
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t t = begin; t < end; ++t) e[c] += double(clip.channel(c)[t]) * clip.channel(c)[t];
  for (std::size_t c = 1; c < 4; ++c) {
    if (g[c] * g[c] < 1e-6) {
      EXPECT_LT(e[c] / e[0], 1e-4);
      continue;
    }
    EXPECT_NEAR(e[c] / e[0], g[c] * g[c], 0.05 * g[c] * g[c]) << "channel " << c;
  }
  EXPECT_EQ(events.size(), 20u);
}

TEST(SynthScene, SameSeedIsBitIdentical) {
  SceneConfig cfg;
  cfg.seed = 99;
  cfg.num_events = 6;
  const auto a = synth_scene(cfg);
  const auto b = synth_scene(cfg);
  EXPECT_EQ(a.first.samples, b.first.samples);
  ASSERT_EQ(a.second.size(), b.second.size());
  for (std::size_t i = 0; i < a.second.size(); ++i) {
    EXPECT_EQ(a.second.events[i].frame, b.second.events[i].frame);
    EXPECT_EQ(a.second.events[i].azimuth_deg, b.second.events[i].azimuth_deg);
    EXPECT_EQ(a.second.events[i].distance_m, b.second.events[i].distance_m);
  }
  cfg.seed = 100;
  EXPECT_NE(synth_scene(cfg).first.samples, a.first.samples);
}

TEST(SynthScene, PolyphonyCapRespected) {
  for (int cap = 1; cap <= 3; ++cap)
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      SceneConfig cfg;
      cfg.class_weights = {0.5, 0.5};
      cfg.num_events = 6;
      cfg.max_polyphony = cap;
      cfg.seed = seed;
      const auto [clip, events] = synth_scene(cfg);
      std::map<std::pair<int, int>, int> count;
      for (const Event& e : events.events) ++count[{e.frame, e.class_idx}];
      for (const auto& [key, n] : count) ASSERT_LE(n, cap);
    }
}

TEST(SynthScene, InfeasiblePlacementFails) {
  SceneConfig cfg;
  cfg.class_weights = {1.0};
  cfg.max_polyphony = 1;
  cfg.num_events = 60;
  cfg.event_frames = {20, 20};
  EXPECT_THROW(synth_scene(cfg), GenerationError);
}

TEST(SynthScene, InvalidConfigRejected) {
  SceneConfig cfg;
  cfg.max_polyphony = 4;
  EXPECT_THROW(synth_scene(cfg), ConfigError);
  cfg = {};
  cfg.class_weights = {0.5, 0.4};
  EXPECT_THROW(synth_scene(cfg), ConfigError);
  cfg = {};
  cfg.distance_range_m = {0.0, 1.0};
  EXPECT_THROW(synth_scene(cfg), ConfigError);
}

TEST(SynthScene, LeastSquaresDoaWithinOneDegree) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> az(-180, 180), el(-80, 80);
  for (int i = 0; i < 20; ++i) {
    const double a = az(rng), e = el(rng);
    const auto [clip, events] = seldde::testing::plane_wave(a, e, 2.0, i % 13);
    const auto doa = seldde::testing::ls_doa(clip);
    EXPECT_LT(seldde::testing::angle_diff(doa[0], a), 1.0);
    EXPECT_NEAR(doa[1], e, 1.0);
  }
}

TEST(DistanceHistogram, Counting) {
  EventList l;
  for (double d : {1.0, 1.5, 3.0}) l.events.push_back({0, 0, 0, 0, 0, d});
  EXPECT_EQ(distance_histogram(l, {0, 2, 4}), (std::vector<std::size_t>{2, 1}));
  EXPECT_EQ(distance_histogram(EventList{}, {0, 2, 4}), (std::vector<std::size_t>{0, 0}));
  EXPECT_THROW(distance_histogram(l, {0, 2, 2}), PreconditionError);
}

TEST(DistanceHistogram, UniformWithinThreeSigma) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(1.0, 3.0);
  EventList l;
  for (int i = 0; i < 1000; ++i) l.events.push_back({0, 0, 0, 0, 0, u(rng)});
  const auto counts = distance_histogram(l, {1, 2, 3});
  const double sigma = std::sqrt(1000 * 0.5 * 0.5);
  for (auto c : counts) EXPECT_LT(std::abs(double(c) - 500.0), 3 * sigma);
  EXPECT_EQ(counts[0] + counts[1], 1000u);
}

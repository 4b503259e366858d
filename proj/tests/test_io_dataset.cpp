#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <sstream>

#include <unsupported/Eigen/FFT>

#include "seldde/io_dataset.hpp"
#include "seldde/wav.hpp"
#include "test_support.hpp"

using namespace seldde;
using seldde::testing::TempDir;

namespace {

wav::Audio make_audio(unsigned rate, std::size_t channels, std::size_t n, double freq_hz = 0.0) {
  wav::Audio a;
  a.sample_rate = rate;
  a.channels.assign(channels, std::vector<float>(n, 0.0f));
  if (freq_hz > 0)
    for (auto& ch : a.channels)
      for (std::size_t t = 0; t < n; ++t)
        ch[t] = static_cast<float>(0.5 * std::sin(2 * std::numbers::pi * freq_hz * t / rate));
  return a;
}

}  // namespace

TEST(LoadFoaWav, SilenceAt24kHz) {
  TempDir dir("io");
  wav::write(dir / "z.wav", make_audio(24000, 4, 24000), wav::SampleFormat::pcm16);
  const FoaClip clip = load_foa_wav(dir / "z.wav");
  EXPECT_EQ(clip.sample_rate, 24000u);
  EXPECT_EQ(clip.num_samples(), 24000u);
  for (float v : clip.samples.values()) ASSERT_EQ(v, 0.0f);
}

TEST(LoadFoaWav, ResamplesFrom48kHz) {
  TempDir dir("io");
  wav::write(dir / "s.wav", make_audio(48000, 4, 48000, 1000.0));
  const FoaClip clip = load_foa_wav(dir / "s.wav");
  ASSERT_EQ(clip.num_samples(), 24000u);
  for (std::size_t c = 0; c < 4; ++c) {
    std::vector<double> x(clip.channel(c), clip.channel(c) + clip.num_samples());
    std::vector<std::complex<double>> X;
    Eigen::FFT<double> fft;
    fft.fwd(X, x);
    std::size_t peak = 0;
    for (std::size_t k = 1; k < X.size() / 2; ++k)
      if (std::abs(X[k]) > std::abs(X[peak])) peak = k;
    EXPECT_EQ(peak, 1000u) << "channel " << c;  // 1 Hz resolution over 1 s
  }
}

TEST(LoadFoaWav, RejectsThreeChannels) {
  TempDir dir("io");
  wav::write(dir / "t.wav", make_audio(24000, 3, 100));
  EXPECT_THROW(load_foa_wav(dir / "t.wav"), FormatError);
}

TEST(LoadFoaWav, MissingFileIsIoError) { EXPECT_THROW(load_foa_wav("/nonexistent/x.wav"), IoError); }

TEST(LoadFoaWav, IdempotentFor24kHzFloat) {
  TempDir dir("io");
  auto a = make_audio(24000, 4, 5000, 440.0);
  wav::write(dir / "a.wav", a);
  const FoaClip first = load_foa_wav(dir / "a.wav");
  save_foa_wav(dir / "b.wav", first);
  const FoaClip second = load_foa_wav(dir / "b.wav");
  EXPECT_EQ(first.samples, second.samples);
  for (std::size_t t = 0; t < 5000; ++t) ASSERT_EQ(first.channel(2)[t], a.channels[2][t]);
}

TEST(ParseMetadata, SingleLine) {
  const EventList l = parse_metadata_csv(std::string("10,5,0,30,-10,1.5\n"));
  ASSERT_EQ(l.size(), 1u);
  const Event& e = l.events[0];
  EXPECT_EQ(e.frame, 10);
  EXPECT_EQ(e.class_idx, 5);
  EXPECT_EQ(e.source_idx, 0);
  EXPECT_DOUBLE_EQ(e.azimuth_deg, 30.0);
  EXPECT_DOUBLE_EQ(e.elevation_deg, -10.0);
  EXPECT_DOUBLE_EQ(e.distance_m, 1.5);
}

TEST(ParseMetadata, EmptyStream) { EXPECT_TRUE(parse_metadata_csv(std::string()).empty()); }

TEST(ParseMetadata, MissingFieldReportsLine) {
  try {
    parse_metadata_csv(std::string("10,5,0,30,-10"));
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1u);
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos);
  }
  try {
    parse_metadata_csv(std::string("1,0,0,0,0,1\n2,0,0,x,0,1\n"));
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(ParseMetadata, SortsAndDropsDuplicates) {
  const EventList l = parse_metadata_csv(std::string("5,2,0,10,0,1\n3,1,0,0,0,2\n5,2,0,10,0,1\n5,0,1,0,0,1\n"));
  ASSERT_EQ(l.size(), 3u);
  EXPECT_EQ(l.events[0].frame, 3);
  EXPECT_EQ(l.events[1].class_idx, 0);
  EXPECT_EQ(l.events[2].class_idx, 2);
}

TEST(ParseMetadata, PolyphonyAboveThreeRejected) {
  EXPECT_THROW(parse_metadata_csv(std::string("1,0,0,0,0,1\n1,0,1,10,0,1\n1,0,2,20,0,1\n1,0,3,30,0,1\n")),
               ValidationError);
  EXPECT_NO_THROW(parse_metadata_csv(std::string("1,0,0,0,0,1\n1,0,1,10,0,1\n1,0,2,20,0,1\n")));
}

TEST(ParseMetadata, RejectsOutOfDomainValues) {
  EXPECT_THROW(parse_metadata_csv(std::string("1,0,0,0,0,0\n")), ParseError);
  EXPECT_THROW(parse_metadata_csv(std::string("1,0,0,0,95,1\n")), ParseError);
}

TEST(ParseMetadata, CentimetreScaling) {
  const EventList l = parse_metadata_csv(std::string("1,0,0,0,0,150\n"), 0.01);
  EXPECT_DOUBLE_EQ(l.events[0].distance_m, 1.5);
}

TEST(WriteMetadata, RoundTrip) {
  EventList l;
  l.events = {{0, 1, 0, -179.5, 12.25, 0.75}, {3, 0, 2, 45.125, -80.0, 6.5}};
  std::ostringstream os;
  write_metadata_csv(os, l);
  const EventList back = parse_metadata_csv(os.str());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_DOUBLE_EQ(back.events[0].azimuth_deg, -179.5);
  EXPECT_DOUBLE_EQ(back.events[1].distance_m, 6.5);
}

TEST(SegmentClip, TwelveSecondsGivesThreePaddedSegments) {
  FoaClip clip(12 * 24000);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t t = 0; t < clip.num_samples(); ++t) clip.channel(c)[t] = static_cast<float>(c + 1);
  const auto segs = segment_clip(clip, {});
  ASSERT_EQ(segs.size(), 3u);
  for (const auto& s : segs) EXPECT_EQ(s.clip.num_samples(), 5u * 24000u);
  std::size_t zeros = 0;
  for (std::size_t t = 0; t < segs[2].clip.num_samples(); ++t) zeros += segs[2].clip.channel(0)[t] == 0.0f;
  EXPECT_EQ(zeros, 3u * 24000u);
}

TEST(SegmentClip, EventFrameBecomesLocal) {
  FoaClip clip(12 * 24000);
  EventList ev;
  ev.events = {{73, 0, 0, 0, 0, 1}};
  const auto segs = segment_clip(clip, ev);
  ASSERT_EQ(segs[1].events.size(), 1u);
  EXPECT_EQ(segs[1].events.events[0].frame, 23);
  EXPECT_TRUE(segs[0].events.empty());
  EXPECT_EQ(segs[1].events.num_label_frames, 50);
}

TEST(SegmentClip, FiveSecondsIsIdentity) {
  auto [clip, ev] = seldde::testing::plane_wave(10, 5);
  const auto segs = segment_clip(clip, ev);
  ASSERT_EQ(segs.size(), 1u);
  EXPECT_EQ(segs[0].clip.samples, clip.samples);
  EXPECT_EQ(segs[0].events.events.size(), ev.events.size());
}

TEST(SegmentClip, ConcatenationAndEventConservation) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-1, 1);
  const std::size_t n = 17 * 24000 + 123;
  FoaClip clip(n);
  for (float& v : clip.samples.storage()) v = u(rng);
  EventList ev;
  for (int f = 0; f < 171; f += 7) ev.events.push_back({f, f % 5, 0, 0, 0, 1});
  const auto segs = segment_clip(clip, ev);
  ASSERT_EQ(segs.size(), 4u);
  std::size_t total_events = 0;
  for (std::size_t c = 0; c < 4; ++c) {
    std::size_t t = 0;
    for (const auto& s : segs)
      for (std::size_t i = 0; i < s.clip.num_samples() && t < n; ++i, ++t)
        ASSERT_EQ(s.clip.channel(c)[i], clip.channel(c)[t]);
    EXPECT_EQ(t, n);
  }
  for (const auto& s : segs) {
    total_events += s.events.size();
    for (const Event& e : s.events.events) {
      EXPECT_GE(e.frame, 0);
      EXPECT_LT(e.frame, 50);
    }
  }
  EXPECT_EQ(total_events, ev.size());
}

#include <gtest/gtest.h>

#include <random>

#include "seldde/adpit_loss.hpp"
#include "seldde/model.hpp"

using namespace seldde;

namespace {

Tensor<double> random_map(Shape s, std::uint64_t seed, double scale = 1.0) {
  Tensor<double> x(std::move(s));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : x.values()) v = n(rng);
  return x;
}

ModelConfig tiny_config(Variant v = Variant::A) {
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

}  // namespace

TEST(ChannelSE, SaturatedGateIsIdentity) {
  nn::ParamLayout L;
  nn::ChannelSE se(L, "cse", 8, 4);
  auto theta = L.initialize<double>(3);
  for (std::size_t c = 0; c < 8; ++c) theta[se.b2.offset + c] = 60.0;
  const auto x = random_map({8, 5, 6}, 1);
  nn::ChannelSE::Cache<double> cache;
  const auto y = se.forward<double>(theta, x, cache);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-12);
}

TEST(ChannelSE, GateShrinksAndZeroStaysZero) {
  nn::ParamLayout L;
  nn::ChannelSE se(L, "cse", 8, 4);
  const auto theta = L.initialize<double>(4);
  const auto x = random_map({8, 5, 6}, 2);
  nn::ChannelSE::Cache<double> cache;
  const auto y = se.forward<double>(theta, x, cache);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(y[i]), std::abs(x[i]));
  for (double g : cache.gate) {
    EXPECT_GT(g, 0.0);
    EXPECT_LT(g, 1.0);
  }
  const auto z = se.forward<double>(theta, Tensor<double>(Shape{8, 5, 6}), cache);
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(nn::ChannelSE(L, "bad", 6, 4), ConfigError);
}

TEST(SpatialSE, SaturatedGateSignAndLocality) {
  nn::ParamLayout L;
  nn::SpatialSE se(L, "sse", 4);
  auto theta = L.initialize<double>(5);
  nn::SpatialSE::Cache<double> cache;
  const auto x = random_map({4, 5, 6}, 3);
  const auto y = se.forward<double>(theta, x, cache);
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] != 0) {
      EXPECT_EQ(std::signbit(y[i]), std::signbit(x[i]));
    }

  Tensor<double> one(Shape{4, 5, 6});
  one(2, 3, 4) = 1.5;
  const auto y1 = se.forward<double>(theta, one, cache);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t f = 0; f < 6; ++f)
        if (c == 2 && t == 3 && f == 4)
          EXPECT_NE(y1(c, t, f), 0.0);
        else
          EXPECT_EQ(y1(c, t, f), 0.0);

  for (std::size_t c = 0; c < 4; ++c) theta[se.w.offset + c] = 0.0;
  theta[se.b.offset] = 60.0;
  const auto y2 = se.forward<double>(theta, x, cache);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y2[i], x[i], 1e-12);
}

TEST(ConcurrentSE, SumOfBothBranches) {
  nn::ParamLayout L;
  nn::ConcurrentSE se(L, "scse", 8, 4);
  auto theta = L.initialize<double>(6);
  const auto x = random_map({8, 4, 3}, 4);
  nn::ConcurrentSE::Cache<double> cache;
  nn::ChannelSE::Cache<double> cc;
  nn::SpatialSE::Cache<double> sc;
  const auto y = se.forward<double>(theta, x, cache);
  const auto a = se.cse.forward<double>(theta, x, cc);
  const auto b = se.sse.forward<double>(theta, x, sc);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], a[i] + b[i]);
  const auto z = se.forward<double>(theta, Tensor<double>(Shape{8, 4, 3}), cache);
  for (double v : z.values()) EXPECT_EQ(v, 0.0);

  for (std::size_t c = 0; c < 8; ++c) theta[se.cse.b2.offset + c] = 60.0;
  for (std::size_t c = 0; c < 8; ++c) theta[se.sse.w.offset + c] = 0.0;
  theta[se.sse.b.offset] = 60.0;
  const auto y2 = se.forward<double>(theta, x, cache);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y2[i], 2 * x[i], 1e-12);
}

TEST(AvgMaxPool, SumOfAverageAndMax) {
  const auto x = random_map({3, 4, 12}, 9);
  const auto y = nn::avgmax_pool_last(x);
  ASSERT_EQ(y.shape(), (Shape{3, 4}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 4; ++t) {
      double sum = 0, mx = -1e300;
      for (std::size_t f = 0; f < 12; ++f) {
        sum += x(c, t, f);
        mx = std::max(mx, x(c, t, f));
      }
      EXPECT_NEAR(y(c, t), sum / 12 + mx, 1e-12);
    }
  const auto seq = random_map({16, 5}, 10);
  const auto p = nn::time_avgmax_pool(seq, 8);
  ASSERT_EQ(p.shape(), (Shape{2, 5}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t d = 0; d < 5; ++d) {
      double sum = 0, mx = -1e300;
      for (std::size_t k = 0; k < 8; ++k) {
        sum += seq(i * 8 + k, d);
        mx = std::max(mx, seq(i * 8 + k, d));
      }
      EXPECT_NEAR(p(i, d), sum / 8 + mx, 1e-12);
    }
}

TEST(ModelConfig, ValidationAndJson) {
  ModelConfig c;
  c.se_reduction = 3;
  EXPECT_THROW(SeldModel{c}, ConfigError);
  c = {};
  c.conv_kernel = 30;
  EXPECT_THROW(SeldModel{c}, ConfigError);
  c = ModelConfig::toy(4);
  c.variant = Variant::C;
  const nlohmann::json j = c;
  const ModelConfig back = j.get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(nlohmann::json({{"preset", "toy"}, {"classes", 5}}).get<ModelConfig>().d_model, 64u);
  EXPECT_THROW(variant_from_string("E"), ConfigError);
}

TEST(SeldModel, VariantParameterCounts) {
  const auto count = [](Variant v) {
    ModelConfig c = ModelConfig::toy();
    c.variant = v;
    return SeldModel(c).num_parameters();
  };
  const ModelConfig toy = ModelConfig::toy();
  const std::size_t last = toy.stage_channels.back();
  EXPECT_EQ(count(Variant::A) - count(Variant::B), scse_parameter_count(last, toy.se_reduction));
  EXPECT_LT(count(Variant::D), count(Variant::A));
  EXPECT_LT(count(Variant::D), count(Variant::C));
  std::size_t blocks_scse = 0;
  for (std::size_t s = 0; s < 4; ++s)
    blocks_scse += toy.blocks_per_stage[s] * scse_parameter_count(toy.stage_channels[s], toy.se_reduction);
  EXPECT_EQ(count(Variant::A) - count(Variant::C), blocks_scse);
  const std::size_t sse = toy.stage_channels.front() + 1;
  EXPECT_EQ(count(Variant::C) - count(Variant::D), sse + scse_parameter_count(last, toy.se_reduction));

  ModelConfig d = toy;
  d.variant = Variant::D;
  for (const auto& s : SeldModel(d).layout().specs()) {
    EXPECT_EQ(s.name.find("sse"), std::string::npos) << s.name;
    EXPECT_EQ(s.name.find("scse"), std::string::npos) << s.name;
  }
}

TEST(SeldModel, EncoderKeepsTimeResolution) {
  const SeldModel m(ModelConfig::toy());
  const auto theta = m.init_weights<float>(1);
  Tensor<float> x(Shape{7, 400, 200});
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n;
  for (float& v : x.values()) v = n(rng);
  ForwardTape<float> tape;
  const auto enc = m.encode<float>(theta, x, tape);
  EXPECT_EQ(enc.shape(), (Shape{16, 400}));
  EXPECT_EQ(tape.freq_pool_in.shape(), (Shape{16, 400, 12}));
  EXPECT_THROW(m.encode<float>(theta, Tensor<float>(Shape{7, 400, 199}), tape), PreconditionError);
}

TEST(SeldModel, ForwardShapeRangeAndScaleSensitivity) {
  const SeldModel m(ModelConfig::toy());
  const auto theta = m.init_weights<float>(3);
  Tensor<float> x(Shape{7, 400, 200});
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n;
  for (float& v : x.values()) v = n(rng);
  const auto y = m.forward<float>(theta, x);
  ASSERT_EQ(y.shape(), (Shape{50, 3, 13, 4}));
  for (float v : y.values()) {
    ASSERT_GT(v, -1.0f);
    ASSERT_LT(v, 1.0f);
  }
  Tensor<float> x2 = x;
  for (float& v : x2.values()) v *= 2.0f;
  const auto y2 = m.forward<float>(theta, x2);
  EXPECT_EQ(y2.shape(), y.shape());
  EXPECT_NE(y2, y);
  EXPECT_THROW(m.forward<float>(std::vector<float>(10), x), PreconditionError);
}

TEST(SeldModel, ExamplesAreIndependent) {
  const SeldModel m(tiny_config());
  const auto theta = m.init_weights<double>(5);
  const auto a = random_map({7, 16, 32}, 11), b = random_map({7, 16, 32}, 12);
  const auto ya = m.forward<double>(theta, a);
  const auto yb = m.forward<double>(theta, b);
  EXPECT_EQ(m.forward<double>(theta, b), yb);
  EXPECT_EQ(m.forward<double>(theta, a), ya);
}

TEST(ConformerBlock, ZeroResidualBranchesGiveLayerNorm) {
  nn::ParamLayout L;
  nn::ConformerBlock block(L, "c", 16, 2, 4, 5, 32);
  nn::LayerNorm ln(L, "ref", 16);
  auto theta = L.initialize<double>(8);
  for (const auto& r : block.residual_outputs()) std::fill_n(theta.begin() + r.offset, r.size, 0.0);
  const auto x = random_map({20, 16}, 13, 3.0);
  nn::ConformerBlock::Cache<double> cache;
  nn::LayerNorm::Cache<double> lc;
  const auto y = block.forward<double>(theta, x, cache);
  const auto want = ln.forward<double>(theta, x, lc);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], want[i], 1e-12);
}

class GradientCheck : public ::testing::TestWithParam<Variant> {};

TEST_P(GradientCheck, AdpitLossMatchesFiniteDifferences) {
  const SeldModel m(tiny_config(GetParam()));
  const auto theta = m.init_weights<double>(7);
  const auto x = random_map({7, 16, 32}, 1);
  Tensor<double> target = random_map(m.output_shape(), 2, 0.5);
  const auto cands = adpit_targets_from_tensor<double>(target);

  ForwardTape<double> tape;
  const auto out = m.forward<double>(theta, x, tape);
  Tensor<double> d_out;
  adpit_mse(out, cands, &d_out);
  std::vector<double> grad(theta.size(), 0.0);
  m.backward<double>(theta, tape, d_out, grad);

  const auto loss_at = [&](std::size_t i, double delta) {
    auto t = theta;
    t[i] += delta;
    return adpit_mse(m.forward<double>(t, x), cands);
  };
  std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()) + 100);
  std::uniform_int_distribution<std::size_t> pick(0, theta.size() - 1);
  const double h = 1e-6;
  for (int n = 0; n < 20; ++n) {
    const std::size_t i = pick(rng);
    const double fd = (loss_at(i, h) - loss_at(i, -h)) / (2 * h);
    const double err = std::abs(fd - grad[i]);
    const double scale = std::max(std::abs(fd), std::abs(grad[i]));
    EXPECT_TRUE(err <= 1e-4 * scale || err < 1e-9) << "param " << i << " fd " << fd << " analytic " << grad[i];
  }
  for (const auto& s : m.layout().specs()) {
    const std::size_t i = s.ref.offset + s.ref.size / 2;
    if (std::abs(grad[i]) < 1e-5) continue;
    const double fd = (loss_at(i, h) - loss_at(i, -h)) / (2 * h);
    EXPECT_NEAR(fd, grad[i], 1e-4 * std::abs(grad[i])) << s.name;
  }
}

INSTANTIATE_TEST_SUITE_P(Variants, GradientCheck, ::testing::Values(Variant::A, Variant::B, Variant::C, Variant::D),
                         [](const auto& info) { return to_string(info.param); });

TEST(SeldModel, BuffersAreCacheLineAligned) {
  const SeldModel m(tiny_config());
  const auto theta = m.init_weights<float>(1);
  EXPECT_EQ(reinterpret_cast<std::uintptr_t>(theta.data()) % 64, 0u);
  for (std::size_t n : {1u, 3u, 17u, 1000u}) {
    const Tensor<double> t(Shape{n});
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.data()) % 64, 0u);
  }
}

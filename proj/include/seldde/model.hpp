#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "seldde/accddoa_codec.hpp"
#include "seldde/error.hpp"
#include "seldde/nn/conformer.hpp"
#include "seldde/nn/layers.hpp"
#include "seldde/nn/params.hpp"
#include "seldde/salsa_features.hpp"

namespace seldde {

/// SE block placement of the submitted systems:
/// A = stem sSE + block SCSE + tail SCSE, B = A without the tail SCSE,
/// C = stem sSE + tail SCSE, D = no SE blocks.
enum class Variant { A, B, C, D };

inline std::string to_string(Variant v) { return std::string(1, static_cast<char>('A' + static_cast<int>(v))); }
inline Variant variant_from_string(const std::string& s) {
  if (s.size() == 1 && s[0] >= 'A' && s[0] <= 'D') return static_cast<Variant>(s[0] - 'A');
  throw ConfigError("unknown model variant '" + s + "'");
}

inline bool has_stem_sse(Variant v) { return v != Variant::D; }
inline bool has_block_scse(Variant v) { return v == Variant::A || v == Variant::B; }
inline bool has_tail_scse(Variant v) { return v == Variant::A || v == Variant::C; }

struct ModelConfig {
  std::size_t in_channels = kNumFeatureChannels;
  std::vector<std::size_t> stage_channels{64, 128, 256, 512};
  std::vector<std::size_t> blocks_per_stage{2, 2, 2, 2};
  std::size_t se_reduction = 4;
  std::size_t conformer_layers = 4;
  std::size_t d_model = 256;
  std::size_t attention_heads = 8;
  std::size_t ff_multiplier = 4;
  std::size_t conv_kernel = 31;
  std::size_t rel_pos_clip = 32;
  std::size_t tracks = kNumTracks;
  std::size_t classes = 13;
  std::size_t time_pool_factor = 8;
  std::size_t input_frames = kNumFeatureFrames;
  std::size_t input_bins = kNumFeatureBins;
  Variant variant = Variant::A;
  std::uint64_t init_seed = 0;

  /// Scaled-down preset for CPU-scale experiments and tests.
  static ModelConfig toy(std::size_t classes = 13) {
    ModelConfig c;
    c.stage_channels = {8, 8, 16, 16};
    c.blocks_per_stage = {1, 1, 1, 1};
    c.conformer_layers = 2;
    c.d_model = 64;
    c.attention_heads = 4;
    c.conv_kernel = 15;
    c.classes = classes;
    return c;
  }

  std::size_t output_frames() const { return input_frames / time_pool_factor; }

  void validate() const {
    if (stage_channels.empty() || stage_channels.size() != blocks_per_stage.size())
      throw ConfigError("stage_channels and blocks_per_stage must be non-empty and equally long");
    for (std::size_t c : stage_channels)
      if (c == 0 || se_reduction == 0 || c % se_reduction != 0)
        throw ConfigError("se_reduction must divide every stage channel count");
    if (time_pool_factor == 0 || input_frames == 0 || input_frames % time_pool_factor != 0)
      throw ConfigError("time_pool_factor must divide input_frames");
    if (tracks != kNumTracks) throw ConfigError("the output format has exactly 3 tracks");
    if (classes == 0) throw ConfigError("classes must be positive");
    if (d_model == 0 || attention_heads == 0 || d_model % attention_heads != 0)
      throw ConfigError("d_model must be divisible by attention_heads");
    if (conv_kernel % 2 == 0) throw ConfigError("conv_kernel must be odd");
    std::size_t bins = input_bins;
    for (std::size_t i = 0; i < stage_channels.size(); ++i) bins /= 2;
    if (bins == 0) throw ConfigError("too many frequency pooling stages for the input width");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"in_channels", c.in_channels},         {"stage_channels", c.stage_channels},
       {"blocks_per_stage", c.blocks_per_stage}, {"se_reduction", c.se_reduction},
       {"conformer_layers", c.conformer_layers}, {"d_model", c.d_model},
       {"attention_heads", c.attention_heads},   {"ff_multiplier", c.ff_multiplier},
       {"conv_kernel", c.conv_kernel},           {"rel_pos_clip", c.rel_pos_clip},
       {"tracks", c.tracks},                     {"classes", c.classes},
       {"time_pool_factor", c.time_pool_factor}, {"input_frames", c.input_frames},
       {"input_bins", c.input_bins},             {"variant", to_string(c.variant)},
       {"init_seed", c.init_seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  if (j.contains("preset") && j.at("preset").get<std::string>() == "toy")
    d = ModelConfig::toy(j.value("classes", d.classes));
  c.in_channels = j.value("in_channels", d.in_channels);
  c.stage_channels = j.value("stage_channels", d.stage_channels);
  c.blocks_per_stage = j.value("blocks_per_stage", d.blocks_per_stage);
  c.se_reduction = j.value("se_reduction", d.se_reduction);
  c.conformer_layers = j.value("conformer_layers", d.conformer_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.attention_heads = j.value("attention_heads", d.attention_heads);
  c.ff_multiplier = j.value("ff_multiplier", d.ff_multiplier);
  c.conv_kernel = j.value("conv_kernel", d.conv_kernel);
  c.rel_pos_clip = j.value("rel_pos_clip", d.rel_pos_clip);
  c.tracks = j.value("tracks", d.tracks);
  c.classes = j.value("classes", d.classes);
  c.time_pool_factor = j.value("time_pool_factor", d.time_pool_factor);
  c.input_frames = j.value("input_frames", d.input_frames);
  c.input_bins = j.value("input_bins", d.input_bins);
  c.variant = variant_from_string(j.value("variant", to_string(d.variant)));
  c.init_seed = j.value("init_seed", d.init_seed);
  c.validate();
}

/// Residual basic block: conv-norm-relu-conv-norm [-SCSE] + shortcut, relu.
struct BasicBlock {
  nn::Conv2d conv1, conv2;
  nn::GroupNorm norm1, norm2;
  std::optional<nn::ConcurrentSE> se;
  std::optional<nn::Conv2d> proj;
  std::optional<nn::GroupNorm> proj_norm;

  template <class T>
  struct Cache {
    Tensor<T> x, h1, h2, out;
    typename nn::GroupNorm::template Cache<T> n1, n2, pn;
    typename nn::ConcurrentSE::template Cache<T> se;
  };

  BasicBlock(nn::ParamLayout& L, const std::string& name, std::size_t in, std::size_t out,
             bool with_se, std::size_t reduction)
      : conv1(L, name + ".conv1", in, out, 3),
        conv2(L, name + ".conv2", out, out, 3),
        norm1(L, name + ".norm1", out),
        norm2(L, name + ".norm2", out) {
    if (with_se) se.emplace(L, name + ".scse", out, reduction);
    if (in != out) {
      proj.emplace(L, name + ".proj", in, out, 1);
      proj_norm.emplace(L, name + ".proj_norm", out);
    }
  }

  template <class T>
  Tensor<T> forward(std::span<const T> theta, const Tensor<T>& x, Cache<T>& c) const {
    c.x = x;
    c.h1 = norm1.forward(theta, conv1.forward(theta, x), c.n1);
    nn::relu_inplace(c.h1);
    c.h2 = norm2.forward(theta, conv2.forward(theta, c.h1), c.n2);
    Tensor<T> y = se ? se->forward(theta, c.h2, c.se) : c.h2;
    if (proj)
      nn::add_inplace(y, proj_norm->forward(theta, proj->forward(theta, x), c.pn));
    else
      nn::add_inplace(y, x);
    nn::relu_inplace(y);
    c.out = y;
    return y;
  }

  template <class T>
  Tensor<T> backward(std::span<const T> theta, const Cache<T>& c, const Tensor<T>& dy,
                     std::span<T> grad) const {
    const Tensor<T> dsum = nn::relu_backward(c.out, dy);
    Tensor<T> g = se ? se->backward(theta, c.h2, c.se, dsum, grad) : dsum;
    g = norm2.backward(theta, c.n2, g, grad);
    g = conv2.backward(theta, c.h1, g, grad);
    g = nn::relu_backward(c.h1, std::move(g));
    g = norm1.backward(theta, c.n1, g, grad);
    Tensor<T> dx = conv1.backward(theta, c.x, g, grad);
    if (proj)
      nn::add_inplace(dx, proj->backward(theta, c.x, proj_norm->backward(theta, c.pn, dsum, grad), grad));
    else
      nn::add_inplace(dx, dsum);
    return dx;
  }
};

/// Intermediate values of one forward pass, consumed by backward().
template <class T>
struct ForwardTape {
  Tensor<T> input, stem_pre, stem_act;
  typename nn::GroupNorm::template Cache<T> stem_norm;
  typename nn::SpatialSE::template Cache<T> stem_sse;
  std::vector<typename BasicBlock::template Cache<T>> blocks;
  std::vector<Tensor<T>> pool_inputs;  // one per stage
  Tensor<T> tail_in;
  typename nn::ConcurrentSE::template Cache<T> tail;
  Tensor<T> freq_pool_in, seq, proj_out;
  std::vector<typename nn::ConformerBlock::template Cache<T>> conformer;
  std::vector<Tensor<T>> conformer_in;
  Tensor<T> time_pool_in, head_in, output;
};

/// SE-augmented ResNet-Conformer with a tanh multi-ACCDDOA head.
///
/// Weights live outside the model in a flat vector laid out by `layout()`,
/// so one architecture object serves float training and double gradient
/// checks alike.
class SeldModel {
 public:
  explicit SeldModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t c0 = cfg_.stage_channels.front();
    stem_ = nn::Conv2d(layout_, "encoder.stem.conv", cfg_.in_channels, c0, 3);
    stem_norm_ = nn::GroupNorm(layout_, "encoder.stem.norm", c0);
    if (has_stem_sse(cfg_.variant)) stem_sse_.emplace(layout_, "encoder.stem.sse", c0);
    std::size_t in = c0;
    for (std::size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
      for (std::size_t b = 0; b < cfg_.blocks_per_stage[s]; ++b) {
        const std::string name = "encoder.stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
        blocks_.emplace_back(layout_, name, in, cfg_.stage_channels[s], has_block_scse(cfg_.variant),
                             cfg_.se_reduction);
        in = cfg_.stage_channels[s];
      }
      stage_end_.push_back(blocks_.size());
    }
    if (has_tail_scse(cfg_.variant)) tail_.emplace(layout_, "encoder.tail.scse", in, cfg_.se_reduction);
    input_proj_ = nn::Linear(layout_, "input_proj", in, cfg_.d_model);
    for (std::size_t l = 0; l < cfg_.conformer_layers; ++l)
      conformer_.emplace_back(layout_, "conformer" + std::to_string(l + 1), cfg_.d_model, cfg_.attention_heads,
                              cfg_.ff_multiplier, cfg_.conv_kernel, cfg_.rel_pos_clip);
    head_ = nn::Linear(layout_, "head", cfg_.d_model, cfg_.tracks * cfg_.classes * kTargetComponents);
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const nn::ParamLayout& layout() const noexcept { return layout_; }
  std::size_t num_parameters() const noexcept { return layout_.size(); }
  const std::vector<nn::ConformerBlock>& conformer_blocks() const noexcept { return conformer_; }

  template <class T>
  AlignedVector<T> init_weights(std::uint64_t seed) const {
    return layout_.initialize<T>(seed);
  }
  template <class T>
  AlignedVector<T> init_weights() const {
    return layout_.initialize<T>(cfg_.init_seed);
  }

  Shape output_shape() const {
    return {cfg_.output_frames(), cfg_.tracks, cfg_.classes, kTargetComponents};
  }

  /// Encoder: features [7, T, F] -> [C_last, T] after frequency AvgMaxPool.
  template <class T>
  Tensor<T> encode(std::span<const T> theta, const Tensor<T>& x, ForwardTape<T>& tape) const {
    if (x.shape() != Shape{cfg_.in_channels, cfg_.input_frames, cfg_.input_bins})
      throw PreconditionError("model input must be " +
                              shape_string({cfg_.in_channels, cfg_.input_frames, cfg_.input_bins}) +
                              ", got " + shape_string(x.shape()));
    check_weights(theta.size());
    tape.input = x;
    tape.stem_pre = stem_norm_.forward(theta, stem_.forward(theta, x), tape.stem_norm);
    Tensor<T> h = tape.stem_pre;
    nn::relu_inplace(h);
    tape.stem_act = h;
    if (stem_sse_) h = stem_sse_->forward(theta, h, tape.stem_sse);

    tape.blocks.assign(blocks_.size(), {});
    tape.pool_inputs.clear();
    std::size_t b = 0;
    for (std::size_t end : stage_end_) {
      for (; b < end; ++b) h = blocks_[b].forward(theta, h, tape.blocks[b]);
      tape.pool_inputs.push_back(h);
      h = nn::freq_avgmax_pool2(h);
    }
    tape.tail_in = h;
    if (tail_) h = tail_->forward(theta, h, tape.tail);
    tape.freq_pool_in = h;
    return nn::avgmax_pool_last(h);
  }

  /// Full forward pass: [7, 400, 200] -> [50, 3, C, 4] in (-1, 1).
  template <class T>
  Tensor<T> forward(std::span<const T> theta, const Tensor<T>& x, ForwardTape<T>& tape) const {
    const Tensor<T> enc = encode(theta, x, tape);  // [C, T]
    const std::size_t C = enc.dim(0), N = enc.dim(1);
    tape.seq = Tensor<T>(Shape{N, C});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < N; ++t) tape.seq(t, c) = enc(c, t);
    Tensor<T> h = input_proj_.forward(theta, tape.seq);
    tape.conformer.assign(conformer_.size(), {});
    tape.conformer_in.clear();
    for (std::size_t l = 0; l < conformer_.size(); ++l) {
      tape.conformer_in.push_back(h);
      h = conformer_[l].forward(theta, h, tape.conformer[l]);
    }
    tape.time_pool_in = h;
    tape.head_in = nn::time_avgmax_pool(h, cfg_.time_pool_factor);
    Tensor<T> out = head_.forward(theta, tape.head_in);
    for (T& v : out.storage()) v = std::tanh(v);
    tape.output = out;
    return out.reshaped(output_shape());
  }

  template <class T>
  Tensor<T> forward(std::span<const T> theta, const Tensor<T>& x) const {
    ForwardTape<T> tape;
    return forward(theta, x, tape);
  }

  /// Accumulates d(loss)/d(theta) into `grad` given d(loss)/d(output).
  template <class T>
  void backward(std::span<const T> theta, const ForwardTape<T>& tape, const Tensor<T>& d_output,
                std::span<T> grad) const {
    check_weights(grad.size());
    Tensor<T> g = d_output.reshaped(tape.output.shape());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= T{1} - tape.output[i] * tape.output[i];
    g = head_.backward(theta, tape.head_in, g, grad);
    g = nn::time_avgmax_pool_backward(tape.time_pool_in, g, cfg_.time_pool_factor);
    for (std::size_t l = conformer_.size(); l-- > 0;) g = conformer_[l].backward(theta, tape.conformer[l], g, grad);
    g = input_proj_.backward(theta, tape.seq, g, grad);

    const std::size_t N = g.dim(0), C = g.dim(1);
    Tensor<T> denc(Shape{C, N});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < N; ++t) denc(c, t) = g(t, c);
    g = nn::avgmax_pool_last_backward(tape.freq_pool_in, denc);
    if (tail_) g = tail_->backward(theta, tape.tail_in, tape.tail, g, grad);
    std::size_t b = blocks_.size();
    for (std::size_t s = stage_end_.size(); s-- > 0;) {
      g = nn::freq_avgmax_pool2_backward(tape.pool_inputs[s], g);
      const std::size_t begin = s == 0 ? 0 : stage_end_[s - 1];
      for (; b > begin; --b) g = blocks_[b - 1].backward(theta, tape.blocks[b - 1], g, grad);
    }
    if (stem_sse_) g = stem_sse_->backward(theta, tape.stem_act, tape.stem_sse, g, grad);
    g = nn::relu_backward(tape.stem_act, std::move(g));
    g = stem_norm_.backward(theta, tape.stem_norm, g, grad);
    (void)stem_.backward(theta, tape.input, g, grad);
  }

 private:
  void check_weights(std::size_t n) const {
    if (n != layout_.size())
      throw PreconditionError("weight vector has " + std::to_string(n) + " entries, model expects " +
                              std::to_string(layout_.size()));
  }

  ModelConfig cfg_;
  nn::ParamLayout layout_;
  nn::Conv2d stem_;
  nn::GroupNorm stem_norm_;
  std::optional<nn::SpatialSE> stem_sse_;
  std::vector<BasicBlock> blocks_;
  std::vector<std::size_t> stage_end_;
  std::optional<nn::ConcurrentSE> tail_;
  nn::Linear input_proj_;
  std::vector<nn::ConformerBlock> conformer_;
  nn::Linear head_;
};

/// Parameter count of one SCSE block on `channels` channels.
inline std::size_t scse_parameter_count(std::size_t channels, std::size_t reduction) {
  const std::size_t r = channels / reduction;
  return (r * channels + r) + (channels * r + channels) + (channels + 1);
}

}  // namespace seldde

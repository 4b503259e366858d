#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "seldde/nn/layers.hpp"

namespace seldde::nn {

/// Multi-head self-attention with a learned per-head relative position bias
/// added to the attention logits; offsets beyond +-clip share one bias.
struct RelPosSelfAttention {
  Linear q, k, v, o;
  ParamRef rel;
  std::size_t dim = 0, heads = 1, clip = 32;

  template <class T>
  struct Cache {
    Tensor<T> x, Q, K, V, O;
    std::vector<MatRM<T>> attn;
  };

  RelPosSelfAttention() = default;
  RelPosSelfAttention(ParamLayout& L, const std::string& name, std::size_t d, std::size_t h,
                      std::size_t rel_clip)
      : dim(d), heads(h), clip(rel_clip) {
    if (h == 0 || d % h != 0) throw ConfigError("d_model must be divisible by the head count");
    q = Linear(L, name + ".q", d, d);
    k = Linear(L, name + ".k", d, d);
    v = Linear(L, name + ".v", d, d);
    o = Linear(L, name + ".out", d, d);
    rel = L.add(name + ".rel_bias", {h, 2 * rel_clip + 1}, Init::zeros);
  }

  std::size_t rel_index(std::size_t i, std::size_t j) const {
    const auto off = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(i),
                                                -static_cast<std::ptrdiff_t>(clip),
                                                static_cast<std::ptrdiff_t>(clip));
    return static_cast<std::size_t>(off + static_cast<std::ptrdiff_t>(clip));
  }

  template <class T>
  Tensor<T> forward(std::span<const T> theta, const Tensor<T>& x, Cache<T>& c) const {
    const std::size_t N = x.dim(0), dh = dim / heads;
    const T scale = T{1} / std::sqrt(static_cast<T>(dh));
    c.x = x;
    c.Q = q.forward(theta, x);
    c.K = k.forward(theta, x);
    c.V = v.forward(theta, x);
    c.O = Tensor<T>(Shape{N, dim});
    c.attn.assign(heads, MatRM<T>());
    const auto Qm = cmat(c.Q.data(), N, dim);
    const auto Km = cmat(c.K.data(), N, dim);
    const auto Vm = cmat(c.V.data(), N, dim);
    auto Om = mat(c.O.data(), N, dim);
    const T* bias = at(theta, rel);
    const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
    for (std::size_t h = 0; h < heads; ++h) {
      MatRM<T>& A = c.attn[h];
      A.noalias() = Qm.middleCols(ei(h * dh), ei(dh)) * Km.middleCols(ei(h * dh), ei(dh)).transpose();
      const T* b = bias + h * (2 * clip + 1);
      for (std::size_t i = 0; i < N; ++i) {
        T* row = A.data() + i * N;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < N; ++j) {
          row[j] = row[j] * scale + b[rel_index(i, j)];
          mx = std::max(mx, row[j]);
        }
        T sum{0};
        for (std::size_t j = 0; j < N; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        for (std::size_t j = 0; j < N; ++j) row[j] /= sum;
      }
      Om.middleCols(ei(h * dh), ei(dh)).noalias() = A * Vm.middleCols(ei(h * dh), ei(dh));
    }
    return o.forward(theta, c.O);
  }

  template <class T>
  Tensor<T> backward(std::span<const T> theta, const Cache<T>& c, const Tensor<T>& dy,
                     std::span<T> grad) const {
    const std::size_t N = c.x.dim(0), dh = dim / heads;
    const T scale = T{1} / std::sqrt(static_cast<T>(dh));
    const Tensor<T> dO = o.backward(theta, c.O, dy, grad);
    Tensor<T> dQ(Shape{N, dim}), dK(Shape{N, dim}), dV(Shape{N, dim});
    const auto Qm = cmat(c.Q.data(), N, dim);
    const auto Km = cmat(c.K.data(), N, dim);
    const auto Vm = cmat(c.V.data(), N, dim);
    const auto dOm = cmat(dO.data(), N, dim);
    auto dQm = mat(dQ.data(), N, dim);
    auto dKm = mat(dK.data(), N, dim);
    auto dVm = mat(dV.data(), N, dim);
    T* drel = at(grad, rel);
    const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
    for (std::size_t h = 0; h < heads; ++h) {
      const MatRM<T>& A = c.attn[h];
      const auto dOh = dOm.middleCols(ei(h * dh), ei(dh));
      MatRM<T> dS = dOh * Vm.middleCols(ei(h * dh), ei(dh)).transpose();
      dVm.middleCols(ei(h * dh), ei(dh)).noalias() = A.transpose() * dOh;
      T* db = drel + h * (2 * clip + 1);
      for (std::size_t i = 0; i < N; ++i) {
        T* row = dS.data() + i * N;
        const T* a = A.data() + i * N;
        T dot{0};
        for (std::size_t j = 0; j < N; ++j) dot += row[j] * a[j];
        for (std::size_t j = 0; j < N; ++j) {
          row[j] = a[j] * (row[j] - dot);
          db[rel_index(i, j)] += row[j];
        }
      }
      dQm.middleCols(ei(h * dh), ei(dh)).noalias() = scale * (dS * Km.middleCols(ei(h * dh), ei(dh)));
      dKm.middleCols(ei(h * dh), ei(dh)).noalias() = scale * (dS.transpose() * Qm.middleCols(ei(h * dh), ei(dh)));
    }
    Tensor<T> dx = q.backward(theta, c.x, dQ, grad);
    add_inplace(dx, k.backward(theta, c.x, dK, grad));
    add_inplace(dx, v.backward(theta, c.x, dV, grad));
    return dx;
  }
};

/// LayerNorm -> Linear(d, m*d) -> Swish -> Linear(m*d, d).
struct FeedForward {
  LayerNorm ln;
  Linear up, down;

  template <class T>
  struct Cache {
    typename LayerNorm::template Cache<T> ln;
    Tensor<T> xn, h, s;
  };

  FeedForward() = default;
  FeedForward(ParamLayout& L, const std::string& name, std::size_t d, std::size_t mult)
      : ln(L, name + ".norm", d), up(L, name + ".up", d, d * mult), down(L, name + ".down", d * mult, d) {}

  template <class T>
  Tensor<T> forward(std::span<const T> theta, const Tensor<T>& x, Cache<T>& c) const {
    c.xn = ln.forward(theta, x, c.ln);
    c.h = up.forward(theta, c.xn);
    c.s = swish(c.h);
    return down.forward(theta, c.s);
  }

  template <class T>
  Tensor<T> backward(std::span<const T> theta, const Cache<T>& c, const Tensor<T>& dy,
                     std::span<T> grad) const {
    const Tensor<T> ds = down.backward(theta, c.s, dy, grad);
    const Tensor<T> dh = swish_backward(c.h, ds);
    const Tensor<T> dxn = up.backward(theta, c.xn, dh, grad);
    return ln.backward(theta, c.ln, dxn, grad);
  }
};

/// LayerNorm -> pointwise(d, 2d) -> GLU -> depthwise conv -> LayerNorm ->
/// Swish -> pointwise(d, d).
struct ConvModule {
  LayerNorm ln;
  Linear pw1;
  DepthwiseConv1d dw;
  LayerNorm norm;
  Linear pw2;

  template <class T>
  struct Cache {
    typename LayerNorm::template Cache<T> ln, norm;
    Tensor<T> xn, p1, g, d, n, s;
  };

  ConvModule() = default;
  ConvModule(ParamLayout& L, const std::string& name, std::size_t d, std::size_t kernel)
      : ln(L, name + ".norm_in", d),
        pw1(L, name + ".pointwise1", d, 2 * d),
        dw(L, name + ".depthwise", d, kernel),
        norm(L, name + ".norm_mid", d),
        pw2(L, name + ".pointwise2", d, d) {}

  template <class T>
  Tensor<T> forward(std::span<const T> theta, const Tensor<T>& x, Cache<T>& c) const {
    c.xn = ln.forward(theta, x, c.ln);
    c.p1 = pw1.forward(theta, c.xn);
    c.g = glu(c.p1);
    c.d = dw.forward(theta, c.g);
    c.n = norm.forward(theta, c.d, c.norm);
    c.s = swish(c.n);
    return pw2.forward(theta, c.s);
  }

  template <class T>
  Tensor<T> backward(std::span<const T> theta, const Cache<T>& c, const Tensor<T>& dy,
                     std::span<T> grad) const {
    Tensor<T> g = pw2.backward(theta, c.s, dy, grad);
    g = swish_backward(c.n, g);
    g = norm.backward(theta, c.norm, g, grad);
    g = dw.backward(theta, c.g, g, grad);
    g = glu_backward(c.p1, g);
    g = pw1.backward(theta, c.xn, g, grad);
    return ln.backward(theta, c.ln, g, grad);
  }
};

/// Macaron conformer block: x + FF/2, + MHSA, + Conv, + FF/2, LayerNorm.
struct ConformerBlock {
  FeedForward ff1;
  LayerNorm att_norm;
  RelPosSelfAttention att;
  ConvModule conv;
  FeedForward ff2;
  LayerNorm out_norm;

  template <class T>
  struct Cache {
    typename FeedForward::template Cache<T> ff1, ff2;
    typename LayerNorm::template Cache<T> att_norm, out_norm;
    typename RelPosSelfAttention::template Cache<T> att;
    typename ConvModule::template Cache<T> conv;
    Tensor<T> xa;
  };

  ConformerBlock() = default;
  ConformerBlock(ParamLayout& L, const std::string& name, std::size_t d, std::size_t heads,
                 std::size_t ff_mult, std::size_t kernel, std::size_t rel_clip)
      : ff1(L, name + ".ff1", d, ff_mult),
        att_norm(L, name + ".att_norm", d),
        att(L, name + ".att", d, heads, rel_clip),
        conv(L, name + ".conv", d, kernel),
        ff2(L, name + ".ff2", d, ff_mult),
        out_norm(L, name + ".out_norm", d) {}

  /// The output projections that close each residual branch.
  std::vector<ParamRef> residual_outputs() const {
    return {ff1.down.w, ff1.down.b, att.o.w, att.o.b, conv.pw2.w, conv.pw2.b, ff2.down.w, ff2.down.b};
  }

  template <class T>
  Tensor<T> forward(std::span<const T> theta, const Tensor<T>& x, Cache<T>& c) const {
    Tensor<T> h = x;
    const Tensor<T> f1 = ff1.forward(theta, h, c.ff1);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += T{0.5} * f1[i];
    c.xa = att_norm.forward(theta, h, c.att_norm);
    add_inplace(h, att.forward(theta, c.xa, c.att));
    add_inplace(h, conv.forward(theta, h, c.conv));
    const Tensor<T> f2 = ff2.forward(theta, h, c.ff2);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += T{0.5} * f2[i];
    return out_norm.forward(theta, h, c.out_norm);
  }

  template <class T>
  Tensor<T> backward(std::span<const T> theta, const Cache<T>& c, const Tensor<T>& dy,
                     std::span<T> grad) const {
    Tensor<T> g = out_norm.backward(theta, c.out_norm, dy, grad);
    Tensor<T> half = g;
    for (T& v : half.storage()) v *= T{0.5};
    add_inplace(g, ff2.backward(theta, c.ff2, half, grad));
    add_inplace(g, conv.backward(theta, c.conv, g, grad));
    const Tensor<T> da = att.backward(theta, c.att, g, grad);
    add_inplace(g, att_norm.backward(theta, c.att_norm, da, grad));
    half = g;
    for (T& v : half.storage()) v *= T{0.5};
    add_inplace(g, ff1.backward(theta, c.ff1, half, grad));
    return g;
  }
};

}  // namespace seldde::nn

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "seldde/nn/params.hpp"
#include "seldde/tensor.hpp"

// Layers read weights from a flat parameter vector `theta` and accumulate
// gradients into `grad`, which shares its layout. Feature maps are [C, H, W]
// tensors (H = time, W = frequency); sequences are [N, D].

namespace seldde::nn {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapM = Eigen::Map<const MatRM<T>>;

template <class T>
CMapM<T> cmat(const T* p, std::size_t rows, std::size_t cols) {
  return CMapM<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class T>
MapM<T> mat(T* p, std::size_t rows, std::size_t cols) {
  return MapM<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class T>
const T* at(std::span<const T> theta, ParamRef r) { return theta.data() + r.offset; }
template <class T>
T* at(std::span<T> grad, ParamRef r) { return grad.data() + r.offset; }

template <class T>
T sigmoid(T x) { return T{1} / (T{1} + std::exp(-x)); }

template <class T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

/// 2-D convolution, stride 1, "same" zero padding, odd kernel.
struct Conv2d {
  ParamRef w, b;
  std::size_t cin = 0, cout = 0, k = 3;
  bool has_bias = false;

  Conv2d() = default;
  Conv2d(ParamLayout& L, const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
         bool bias = false)
      : cin(in), cout(out), k(kernel), has_bias(bias) {
    const double fan_in = static_cast<double>(in * kernel * kernel);
    w = L.add(name + ".weight", {out, in, kernel, kernel}, Init::he_normal, fan_in,
              static_cast<double>(out * kernel * kernel));
    if (bias) b = L.add(name + ".bias", {out}, Init::zeros);
  }

  template <class T>
  MatRM<T> im2col(const Tensor<T>& x) const {
    const std::size_t H = x.dim(1), W = x.dim(2), pad = k / 2;
    MatRM<T> cols(static_cast<Eigen::Index>(cin * k * k), static_cast<Eigen::Index>(H * W));
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          T* row = cols.data() + ((c * k + ky) * k + kx) * H * W;
          for (std::size_t h = 0; h < H; ++h) {
            T* dst = row + h * W;
            const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h + ky) - static_cast<std::ptrdiff_t>(pad);
            if (sh < 0 || sh >= static_cast<std::ptrdiff_t>(H)) {
              std::fill(dst, dst + W, T{0});
              continue;
            }
            const T* src = &x(c, static_cast<std::size_t>(sh), 0);
            for (std::size_t ww = 0; ww < W; ++ww) {
              const std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(ww + kx) - static_cast<std::ptrdiff_t>(pad);
              dst[ww] = sw >= 0 && sw < static_cast<std::ptrdiff_t>(W) ? src[sw] : T{0};
            }
          }
        }
    return cols;
  }

  template <class T>
  Tensor<T> col2im(const MatRM<T>& cols, std::size_t H, std::size_t W) const {
    const std::size_t pad = k / 2;
    Tensor<T> dx(Shape{cin, H, W});
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const T* row = cols.data() + ((c * k + ky) * k + kx) * H * W;
          for (std::size_t h = 0; h < H; ++h) {
            const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h + ky) - static_cast<std::ptrdiff_t>(pad);
            if (sh < 0 || sh >= static_cast<std::ptrdiff_t>(H)) continue;
            T* dst = &dx(c, static_cast<std::size_t>(sh), 0);
            const T* src = row + h * W;
            for (std::size_t ww = 0; ww < W; ++ww) {
              const std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(ww + kx) - static_cast<std::ptrdiff_t>(pad);
              if (sw >= 0 && sw < static_cast<std::ptrdiff_t>(W)) dst[sw] += src[ww];
            }
          }
        }
    return dx;
  }

  template <class T>
  Tensor<T> forward(std::span<const T> theta, const Tensor<T>& x) const {
    if (x.rank() != 3 || x.dim(0) != cin)
      throw PreconditionError("conv2d expects " + std::to_string(cin) + " input channels, got " +
                              shape_string(x.shape()));
    const std::size_t H = x.dim(1), W = x.dim(2), HW = H * W;
    Tensor<T> y(Shape{cout, H, W});
    auto Y = mat(y.data(), cout, HW);
    const auto Wm = cmat(at(theta, w), cout, cin * k * k);
    if (k == 1)
      Y.noalias() = Wm * cmat(x.data(), cin, HW);
    else
      Y.noalias() = Wm * im2col(x);
    if (has_bias) {
      const T* bias = at(theta, b);
      for (std::size_t o = 0; o < cout; ++o) Y.row(static_cast<Eigen::Index>(o)).array() += bias[o];
    }
    return y;
  }

  template <class T>
  Tensor<T> backward(std::span<const T> theta, const Tensor<T>& x, const Tensor<T>& dy,
                     std::span<T> grad) const {
    const std::size_t H = x.dim(1), W = x.dim(2), HW = H * W;
    const auto dY = cmat(dy.data(), cout, HW);
    const auto Wm = cmat(at(theta, w), cout, cin * k * k);
    auto dW = mat(at(grad, w), cout, cin * k * k);
    if (has_bias) {
      T* db = at(grad, b);
      for (std::size_t o = 0; o < cout; ++o) db[o] += dY.row(static_cast<Eigen::Index>(o)).sum();
    }
    if (k == 1) {
      const auto X = cmat(x.data(), cin, HW);
      dW.noalias() += dY * X.transpose();
      Tensor<T> dx(Shape{cin, H, W});
      mat(dx.data(), cin, HW).noalias() = Wm.transpose() * dY;
      return dx;
    }
    const MatRM<T> cols = im2col(x);
    dW.noalias() += dY * cols.transpose();
    MatRM<T> dcols = Wm.transpose() * dY;
    return col2im(dcols, H, W);
  }
};

/// Normalization over all of (C, H, W) of one sample with a per-channel
/// affine transform (group norm with a single group).
struct GroupNorm {
  ParamRef gamma, beta;
  std::size_t channels = 0;
  double eps = 1e-5;

  template <class T>
  struct Cache {
    Tensor<T> xhat;
    T inv_std{};
  };

  GroupNorm() = default;
  GroupNorm(ParamLayout& L, const std::string& name, std::size_t c) : channels(c) {
    gamma = L.add(name + ".gamma", {c}, Init::ones);
    beta = L.add(name + ".beta", {c}, Init::zeros);
  }

  template <class T>
  Tensor<T> forward(std::span<const T> theta, const Tensor<T>& x, Cache<T>& cache) const {
    const std::size_t n = x.size(), plane = n / channels;
    double sum = 0, sq = 0;
    for (std::size_t i = 0; i < n; ++i) sum += static_cast<double>(x[i]);
    const double mean = sum / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = static_cast<double>(x[i]) - mean;
      sq += d * d;
    }
    const double inv = 1.0 / std::sqrt(sq / static_cast<double>(n) + eps);
    cache.inv_std = static_cast<T>(inv);
    cache.xhat = Tensor<T>(x.shape());
    Tensor<T> y(x.shape());
    const T* g = at(theta, gamma);
    const T* bt = at(theta, beta);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) {
        const T xh = static_cast<T>((static_cast<double>(x[i]) - mean) * inv);
        cache.xhat[i] = xh;
        y[i] = g[c] * xh + bt[c];
      }
    return y;
  }

  template <class T>
  Tensor<T> backward(std::span<const T> theta, const Cache<T>& cache, const Tensor<T>& dy,
                     std::span<T> grad) const {
    const std::size_t n = dy.size(), plane = n / channels;
    const T* g = at(theta, gamma);
    T* dg = at(grad, gamma);
    T* db = at(grad, beta);
    Tensor<T> dxhat(dy.shape());
    double sum_d = 0, sum_dx = 0;
    for (std::size_t c = 0; c < channels; ++c) {
      double acc_g = 0, acc_b = 0;
      for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) {
        acc_g += static_cast<double>(dy[i]) * cache.xhat[i];
        acc_b += static_cast<double>(dy[i]);
        const T d = dy[i] * g[c];
        dxhat[i] = d;
        sum_d += static_cast<double>(d);
        sum_dx += static_cast<double>(d) * cache.xhat[i];
      }
      dg[c] += static_cast<T>(acc_g);
      db[c] += static_cast<T>(acc_b);
    }
    const double mean_d = sum_d / static_cast<double>(n), mean_dx = sum_dx / static_cast<double>(n);
    Tensor<T> dx(dy.shape());
    for (std::size_t i = 0; i < n; ++i)
      dx[i] = static_cast<T>(cache.inv_std * (dxhat[i] - mean_d - cache.xhat[i] * mean_dx));
    return dx;
  }
};

template <class T>
void relu_inplace(Tensor<T>& x) {
  for (T& v : x.storage()) v = v > T{0} ? v : T{0};
}

/// Gradient through a ReLU given its output.
template <class T>
Tensor<T> relu_backward(const Tensor<T>& y, Tensor<T> dy) {
  for (std::size_t i = 0; i < dy.size(); ++i)
    if (!(y[i] > T{0})) dy[i] = T{0};
  return dy;
}

/// Spatial squeeze, channel excitation: per-channel sigmoid gates from the
/// global average pool through a bottleneck MLP.
struct ChannelSE {
  ParamRef w1, b1, w2, b2;
  std::size_t channels = 0, reduced = 0;

  template <class T>
  struct Cache {
    AlignedVector<T> pooled, pre, hidden, gate;
  };

  ChannelSE() = default;
  ChannelSE(ParamLayout& L, const std::string& name, std::size_t c, std::size_t reduction)
      : channels(c), reduced(c / reduction) {
    if (reduction == 0 || c % reduction != 0 || reduced == 0)
      throw ConfigError("channel count " + std::to_string(c) + " not divisible by SE reduction " +
                        std::to_string(reduction));
    w1 = L.add(name + ".fc1.weight", {reduced, c}, Init::he_normal, static_cast<double>(c));
    b1 = L.add(name + ".fc1.bias", {reduced}, Init::zeros);
    w2 = L.add(name + ".fc2.weight", {c, reduced}, Init::xavier_uniform, static_cast<double>(reduced),
               static_cast<double>(c));
    b2 = L.add(name + ".fc2.bias", {c}, Init::zeros);
  }

  template <class T>
  Tensor<T> forward(std::span<const T> theta, const Tensor<T>& x, Cache<T>& cache) const {
    const std::size_t plane = x.size() / channels;
    cache.pooled.assign(channels, T{0});
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0;
      for (std::size_t i = 0; i < plane; ++i) s += static_cast<double>(x[c * plane + i]);
      cache.pooled[c] = static_cast<T>(s / static_cast<double>(plane));
    }
    const T* W1 = at(theta, w1);
    const T* B1 = at(theta, b1);
    const T* W2 = at(theta, w2);
    const T* B2 = at(theta, b2);
    cache.pre.assign(reduced, T{0});
    cache.hidden.assign(reduced, T{0});
    for (std::size_t r = 0; r < reduced; ++r) {
      T acc = B1[r];
      for (std::size_t c = 0; c < channels; ++c) acc += W1[r * channels + c] * cache.pooled[c];
      cache.pre[r] = acc;
      cache.hidden[r] = acc > T{0} ? acc : T{0};
    }
    cache.gate.assign(channels, T{0});
    Tensor<T> y(x.shape());
    for (std::size_t c = 0; c < channels; ++c) {
      T acc = B2[c];
      for (std::size_t r = 0; r < reduced; ++r) acc += W2[c * reduced + r] * cache.hidden[r];
      const T g = sigmoid(acc);
      cache.gate[c] = g;
      for (std::size_t i = 0; i < plane; ++i) y[c * plane + i] = g * x[c * plane + i];
    }
    return y;
  }

  template <class T>
  Tensor<T> backward(std::span<const T> theta, const Tensor<T>& x, const Cache<T>& cache,
                     const Tensor<T>& dy, std::span<T> grad) const {
    const std::size_t plane = x.size() / channels;
    const T* W1 = at(theta, w1);
    const T* W2 = at(theta, w2);
    T* dW1 = at(grad, w1);
    T* dB1 = at(grad, b1);
    T* dW2 = at(grad, w2);
    T* dB2 = at(grad, b2);
    AlignedVector<T> dz2(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      double dg = 0;
      for (std::size_t i = 0; i < plane; ++i)
        dg += static_cast<double>(dy[c * plane + i]) * x[c * plane + i];
      const T g = cache.gate[c];
      dz2[c] = static_cast<T>(dg) * g * (T{1} - g);
      dB2[c] += dz2[c];
      for (std::size_t r = 0; r < reduced; ++r) dW2[c * reduced + r] += dz2[c] * cache.hidden[r];
    }
    AlignedVector<T> dz1(reduced);
    for (std::size_t r = 0; r < reduced; ++r) {
      T acc{0};
      for (std::size_t c = 0; c < channels; ++c) acc += W2[c * reduced + r] * dz2[c];
      dz1[r] = cache.pre[r] > T{0} ? acc : T{0};
      dB1[r] += dz1[r];
      for (std::size_t c = 0; c < channels; ++c) dW1[r * channels + c] += dz1[r] * cache.pooled[c];
    }
    Tensor<T> dx(x.shape());
    for (std::size_t c = 0; c < channels; ++c) {
      T dpool{0};
      for (std::size_t r = 0; r < reduced; ++r) dpool += W1[r * channels + c] * dz1[r];
      dpool /= static_cast<T>(plane);
      const T g = cache.gate[c];
      for (std::size_t i = 0; i < plane; ++i) dx[c * plane + i] = dy[c * plane + i] * g + dpool;
    }
    return dx;
  }
};

/// Channel squeeze, spatial excitation: a 1x1 convolution to one map whose
/// sigmoid gates every (time, frequency) position across all channels.
struct SpatialSE {
  ParamRef w, b;
  std::size_t channels = 0;

  template <class T>
  struct Cache {
    AlignedVector<T> gate;
  };

  SpatialSE() = default;
  SpatialSE(ParamLayout& L, const std::string& name, std::size_t c) : channels(c) {
    w = L.add(name + ".weight", {1, c, 1, 1}, Init::xavier_uniform, static_cast<double>(c), 1.0);
    b = L.add(name + ".bias", {1}, Init::zeros);
  }

  template <class T>
  Tensor<T> forward(std::span<const T> theta, const Tensor<T>& x, Cache<T>& cache) const {
    const std::size_t plane = x.size() / channels;
    const T* W = at(theta, w);
    const T bias = *at(theta, b);
    cache.gate.assign(plane, bias);
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < plane; ++i) cache.gate[i] += W[c] * x[c * plane + i];
    for (T& q : cache.gate) q = sigmoid(q);
    Tensor<T> y(x.shape());
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < plane; ++i) y[c * plane + i] = cache.gate[i] * x[c * plane + i];
    return y;
  }

  template <class T>
  Tensor<T> backward(std::span<const T> theta, const Tensor<T>& x, const Cache<T>& cache,
                     const Tensor<T>& dy, std::span<T> grad) const {
    const std::size_t plane = x.size() / channels;
    const T* W = at(theta, w);
    T* dW = at(grad, w);
    T* dB = at(grad, b);
    AlignedVector<T> dz(plane, T{0});
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < plane; ++i) dz[i] += dy[c * plane + i] * x[c * plane + i];
    double db = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      const T q = cache.gate[i];
      dz[i] *= q * (T{1} - q);
      db += static_cast<double>(dz[i]);
    }
    *dB += static_cast<T>(db);
    Tensor<T> dx(x.shape());
    for (std::size_t c = 0; c < channels; ++c) {
      double dw = 0;
      for (std::size_t i = 0; i < plane; ++i) {
        dw += static_cast<double>(dz[i]) * x[c * plane + i];
        dx[c * plane + i] = dy[c * plane + i] * cache.gate[i] + W[c] * dz[i];
      }
      dW[c] += static_cast<T>(dw);
    }
    return dx;
  }
};

/// Concurrent spatial and channel SE: cSE(x) + sSE(x).
struct ConcurrentSE {
  ChannelSE cse;
  SpatialSE sse;

  template <class T>
  struct Cache {
    typename ChannelSE::template Cache<T> cse;
    typename SpatialSE::template Cache<T> sse;
  };

  ConcurrentSE() = default;
  ConcurrentSE(ParamLayout& L, const std::string& name, std::size_t c, std::size_t reduction)
      : cse(L, name + ".cse", c, reduction), sse(L, name + ".sse", c) {}

  template <class T>
  Tensor<T> forward(std::span<const T> theta, const Tensor<T>& x, Cache<T>& cache) const {
    Tensor<T> y = cse.forward(theta, x, cache.cse);
    add_inplace(y, sse.forward(theta, x, cache.sse));
    return y;
  }

  template <class T>
  Tensor<T> backward(std::span<const T> theta, const Tensor<T>& x, const Cache<T>& cache,
                     const Tensor<T>& dy, std::span<T> grad) const {
    Tensor<T> dx = cse.backward(theta, x, cache.cse, dy, grad);
    add_inplace(dx, sse.backward(theta, x, cache.sse, dy, grad));
    return dx;
  }
};

/// avg + max over non-overlapping pairs along the last axis; an odd trailing
/// bin is dropped.
template <class T>
Tensor<T> freq_avgmax_pool2(const Tensor<T>& x) {
  const std::size_t rows = x.size() / x.dim(2), W = x.dim(2), Wo = W / 2;
  Shape s = x.shape();
  s[2] = Wo;
  Tensor<T> y(s);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < Wo; ++j) {
      const T a = x[r * W + 2 * j], b = x[r * W + 2 * j + 1];
      y[r * Wo + j] = (a + b) / T{2} + std::max(a, b);
    }
  return y;
}

template <class T>
Tensor<T> freq_avgmax_pool2_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  const std::size_t rows = x.size() / x.dim(2), W = x.dim(2), Wo = W / 2;
  Tensor<T> dx(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < Wo; ++j) {
      const T a = x[r * W + 2 * j], b = x[r * W + 2 * j + 1];
      const T g = dy[r * Wo + j];
      dx[r * W + 2 * j] = g / T{2} + (a >= b ? g : T{0});
      dx[r * W + 2 * j + 1] = g / T{2} + (a >= b ? T{0} : g);
    }
  return dx;
}

/// avg + max over the whole last axis: [C, H, W] -> [C, H].
template <class T>
Tensor<T> avgmax_pool_last(const Tensor<T>& x) {
  const std::size_t W = x.shape().back(), rows = x.size() / W;
  Shape s = x.shape();
  s.pop_back();
  Tensor<T> y(s);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = x.data() + r * W;
    T sum{0}, mx = p[0];
    for (std::size_t j = 0; j < W; ++j) {
      sum += p[j];
      mx = std::max(mx, p[j]);
    }
    y[r] = sum / static_cast<T>(W) + mx;
  }
  return y;
}

template <class T>
Tensor<T> avgmax_pool_last_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  const std::size_t W = x.shape().back(), rows = x.size() / W;
  Tensor<T> dx(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = x.data() + r * W;
    const std::size_t am = static_cast<std::size_t>(std::max_element(p, p + W) - p);
    for (std::size_t j = 0; j < W; ++j) dx[r * W + j] = dy[r] / static_cast<T>(W);
    dx[r * W + am] += dy[r];
  }
  return dx;
}

/// avg + max over windows of `factor` consecutive rows of a [N, D] sequence.
template <class T>
Tensor<T> time_avgmax_pool(const Tensor<T>& x, std::size_t factor) {
  const std::size_t N = x.dim(0), D = x.dim(1), No = N / factor;
  Tensor<T> y(Shape{No, D});
  for (std::size_t i = 0; i < No; ++i)
    for (std::size_t d = 0; d < D; ++d) {
      T sum{0}, mx = x(i * factor, d);
      for (std::size_t k = 0; k < factor; ++k) {
        const T v = x(i * factor + k, d);
        sum += v;
        mx = std::max(mx, v);
      }
      y(i, d) = sum / static_cast<T>(factor) + mx;
    }
  return y;
}

template <class T>
Tensor<T> time_avgmax_pool_backward(const Tensor<T>& x, const Tensor<T>& dy, std::size_t factor) {
  const std::size_t No = dy.dim(0), D = x.dim(1);
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < No; ++i)
    for (std::size_t d = 0; d < D; ++d) {
      std::size_t am = i * factor;
      for (std::size_t k = 1; k < factor; ++k)
        if (x(i * factor + k, d) > x(am, d)) am = i * factor + k;
      for (std::size_t k = 0; k < factor; ++k) dx(i * factor + k, d) = dy(i, d) / static_cast<T>(factor);
      dx(am, d) += dy(i, d);
    }
  return dx;
}

/// Affine map on the last axis of a [N, in] sequence.
struct Linear {
  ParamRef w, b;
  std::size_t in = 0, out = 0;

  Linear() = default;
  Linear(ParamLayout& L, const std::string& name, std::size_t n_in, std::size_t n_out)
      : in(n_in), out(n_out) {
    w = L.add(name + ".weight", {n_out, n_in}, Init::xavier_uniform, static_cast<double>(n_in),
              static_cast<double>(n_out));
    b = L.add(name + ".bias", {n_out}, Init::zeros);
  }

  template <class T>
  Tensor<T> forward(std::span<const T> theta, const Tensor<T>& x) const {
    const std::size_t N = x.dim(0);
    Tensor<T> y(Shape{N, out});
    auto Y = mat(y.data(), N, out);
    Y.noalias() = cmat(x.data(), N, in) * cmat(at(theta, w), out, in).transpose();
    const Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(at(theta, b), static_cast<Eigen::Index>(out));
    Y.rowwise() += bias;
    return y;
  }

  template <class T>
  Tensor<T> backward(std::span<const T> theta, const Tensor<T>& x, const Tensor<T>& dy,
                     std::span<T> grad) const {
    const std::size_t N = x.dim(0);
    const auto dY = cmat(dy.data(), N, out);
    mat(at(grad, w), out, in).noalias() += dY.transpose() * cmat(x.data(), N, in);
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(at(grad, b), static_cast<Eigen::Index>(out));
    db += dY.colwise().sum();
    Tensor<T> dx(Shape{N, in});
    mat(dx.data(), N, in).noalias() = dY * cmat(at(theta, w), out, in);
    return dx;
  }
};

/// Layer normalization over the last axis of a [N, D] sequence.
struct LayerNorm {
  ParamRef gamma, beta;
  std::size_t dim = 0;
  double eps = 1e-5;

  template <class T>
  struct Cache {
    Tensor<T> xhat;
    AlignedVector<T> inv_std;
  };

  LayerNorm() = default;
  LayerNorm(ParamLayout& L, const std::string& name, std::size_t d) : dim(d) {
    gamma = L.add(name + ".gamma", {d}, Init::ones);
    beta = L.add(name + ".beta", {d}, Init::zeros);
  }

  template <class T>
  Tensor<T> forward(std::span<const T> theta, const Tensor<T>& x, Cache<T>& cache) const {
    const std::size_t N = x.dim(0);
    const T* g = at(theta, gamma);
    const T* bt = at(theta, beta);
    cache.xhat = Tensor<T>(x.shape());
    cache.inv_std.assign(N, T{0});
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < N; ++i) {
      const T* row = &x(i, 0);
      double mean = 0, var = 0;
      for (std::size_t d = 0; d < dim; ++d) mean += static_cast<double>(row[d]);
      mean /= static_cast<double>(dim);
      for (std::size_t d = 0; d < dim; ++d) var += (row[d] - mean) * (row[d] - mean);
      const double inv = 1.0 / std::sqrt(var / static_cast<double>(dim) + eps);
      cache.inv_std[i] = static_cast<T>(inv);
      for (std::size_t d = 0; d < dim; ++d) {
        const T xh = static_cast<T>((row[d] - mean) * inv);
        cache.xhat(i, d) = xh;
        y(i, d) = g[d] * xh + bt[d];
      }
    }
    return y;
  }

  template <class T>
  Tensor<T> backward(std::span<const T> theta, const Cache<T>& cache, const Tensor<T>& dy,
                     std::span<T> grad) const {
    const std::size_t N = dy.dim(0);
    const T* g = at(theta, gamma);
    T* dg = at(grad, gamma);
    T* db = at(grad, beta);
    Tensor<T> dx(dy.shape());
    AlignedVector<T> dxh(dim);
    for (std::size_t i = 0; i < N; ++i) {
      double mean_d = 0, mean_dx = 0;
      for (std::size_t d = 0; d < dim; ++d) {
        const T xh = cache.xhat(i, d);
        dg[d] += dy(i, d) * xh;
        db[d] += dy(i, d);
        dxh[d] = dy(i, d) * g[d];
        mean_d += static_cast<double>(dxh[d]);
        mean_dx += static_cast<double>(dxh[d]) * xh;
      }
      mean_d /= static_cast<double>(dim);
      mean_dx /= static_cast<double>(dim);
      for (std::size_t d = 0; d < dim; ++d)
        dx(i, d) = static_cast<T>(cache.inv_std[i] * (dxh[d] - mean_d - cache.xhat(i, d) * mean_dx));
    }
    return dx;
  }
};

template <class T>
Tensor<T> swish(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * sigmoid(x[i]);
  return y;
}

template <class T>
Tensor<T> swish_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T s = sigmoid(x[i]);
    dx[i] = dy[i] * (s + x[i] * s * (T{1} - s));
  }
  return dx;
}

/// Gated linear unit over the last axis: [N, 2D] -> [N, D], a * sigmoid(b).
template <class T>
Tensor<T> glu(const Tensor<T>& x) {
  const std::size_t N = x.dim(0), D = x.dim(1) / 2;
  Tensor<T> y(Shape{N, D});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t d = 0; d < D; ++d) y(i, d) = x(i, d) * sigmoid(x(i, D + d));
  return y;
}

template <class T>
Tensor<T> glu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  const std::size_t N = x.dim(0), D = x.dim(1) / 2;
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t d = 0; d < D; ++d) {
      const T s = sigmoid(x(i, D + d));
      dx(i, d) = dy(i, d) * s;
      dx(i, D + d) = dy(i, d) * x(i, d) * s * (T{1} - s);
    }
  return dx;
}

/// Per-channel convolution along the sequence axis, "same" padding.
struct DepthwiseConv1d {
  ParamRef w, b;
  std::size_t channels = 0, kernel = 1;

  DepthwiseConv1d() = default;
  DepthwiseConv1d(ParamLayout& L, const std::string& name, std::size_t c, std::size_t k)
      : channels(c), kernel(k) {
    if (k % 2 == 0) throw ConfigError("depthwise kernel size must be odd");
    w = L.add(name + ".weight", {c, k}, Init::he_normal, static_cast<double>(k));
    b = L.add(name + ".bias", {c}, Init::zeros);
  }

  template <class T>
  Tensor<T> forward(std::span<const T> theta, const Tensor<T>& x) const {
    const auto N = static_cast<std::ptrdiff_t>(x.dim(0));
    const auto pad = static_cast<std::ptrdiff_t>(kernel / 2);
    const T* W = at(theta, w);
    const T* B = at(theta, b);
    Tensor<T> y(x.shape());
    for (std::ptrdiff_t t = 0; t < N; ++t) {
      T* out = &y(static_cast<std::size_t>(t), 0);
      for (std::size_t c = 0; c < channels; ++c) out[c] = B[c];
      for (std::size_t k = 0; k < kernel; ++k) {
        const std::ptrdiff_t s = t + static_cast<std::ptrdiff_t>(k) - pad;
        if (s < 0 || s >= N) continue;
        const T* in = &x(static_cast<std::size_t>(s), 0);
        for (std::size_t c = 0; c < channels; ++c) out[c] += W[c * kernel + k] * in[c];
      }
    }
    return y;
  }

  template <class T>
  Tensor<T> backward(std::span<const T> theta, const Tensor<T>& x, const Tensor<T>& dy,
                     std::span<T> grad) const {
    const auto N = static_cast<std::ptrdiff_t>(x.dim(0));
    const auto pad = static_cast<std::ptrdiff_t>(kernel / 2);
    const T* W = at(theta, w);
    T* dW = at(grad, w);
    T* dB = at(grad, b);
    Tensor<T> dx(x.shape());
    for (std::ptrdiff_t t = 0; t < N; ++t) {
      const T* g = &dy(static_cast<std::size_t>(t), 0);
      for (std::size_t c = 0; c < channels; ++c) dB[c] += g[c];
      for (std::size_t k = 0; k < kernel; ++k) {
        const std::ptrdiff_t s = t + static_cast<std::ptrdiff_t>(k) - pad;
        if (s < 0 || s >= N) continue;
        const T* in = &x(static_cast<std::size_t>(s), 0);
        T* din = &dx(static_cast<std::size_t>(s), 0);
        for (std::size_t c = 0; c < channels; ++c) {
          dW[c * kernel + k] += g[c] * in[c];
          din[c] += W[c * kernel + k] * g[c];
        }
      }
    }
    return dx;
  }
};

}  // namespace seldde::nn

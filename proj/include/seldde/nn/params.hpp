#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "seldde/error.hpp"
#include "seldde/tensor.hpp"

namespace seldde::nn {

/// Slice of the flat parameter vector owned by one weight tensor.
struct ParamRef {
  std::size_t offset = 0;
  std::size_t size = 0;

  template <class T>
  const T* in(std::span<const T> theta) const { return theta.data() + offset; }
  template <class T>
  T* in(std::span<T> theta) const { return theta.data() + offset; }
};

enum class Init { zeros, ones, he_normal, xavier_uniform };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamRef ref;
  Init init = Init::zeros;
  double fan_in = 1;
  double fan_out = 1;
};

/// Registry of every weight tensor of a model, in registration order.
class ParamLayout {
 public:
  ParamRef add(std::string name, Shape shape, Init init, double fan_in = 1, double fan_out = 1) {
    ParamRef ref{total_, shape_size(shape)};
    specs_.push_back({std::move(name), std::move(shape), ref, init, fan_in, fan_out});
    total_ += ref.size;
    return ref;
  }

  std::size_t size() const noexcept { return total_; }
  const std::vector<ParamSpec>& specs() const noexcept { return specs_; }

  /// Fresh parameters; the draw order follows registration order.
  template <class T>
  AlignedVector<T> initialize(std::uint64_t seed) const {
    AlignedVector<T> theta(total_, T{0});
    std::mt19937_64 rng(seed);
    for (const ParamSpec& s : specs_) {
      T* p = theta.data() + s.ref.offset;
      switch (s.init) {
        case Init::zeros: break;
        case Init::ones: std::fill(p, p + s.ref.size, T{1}); break;
        case Init::he_normal: {
          std::normal_distribution<double> d(0.0, std::sqrt(2.0 / s.fan_in));
          for (std::size_t i = 0; i < s.ref.size; ++i) p[i] = static_cast<T>(d(rng));
          break;
        }
        case Init::xavier_uniform: {
          const double a = std::sqrt(6.0 / (s.fan_in + s.fan_out));
          std::uniform_real_distribution<double> d(-a, a);
          for (std::size_t i = 0; i < s.ref.size; ++i) p[i] = static_cast<T>(d(rng));
          break;
        }
      }
    }
    return theta;
  }

 private:
  std::vector<ParamSpec> specs_;
  std::size_t total_ = 0;
};

}  // namespace seldde::nn

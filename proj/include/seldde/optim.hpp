#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "seldde/error.hpp"

namespace seldde {

/// Transformer warmup schedule: linear rise to peak at `warmup`, then
/// inverse-square-root decay.
inline double lr_schedule(long step, double peak_lr, long warmup) {
  if (step < 1) throw PreconditionError("lr_schedule: step must be >= 1");
  if (warmup < 1) throw PreconditionError("lr_schedule: warmup must be >= 1");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  if (step == warmup) return peak_lr;
  return peak_lr * std::min(s / w, std::sqrt(w / s));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a flat parameter vector.
template <typename T>
class Adam {
 public:
  explicit Adam(std::size_t n, AdamConfig cfg = {}) : cfg_(cfg), m_(n, T(0)), v_(n, T(0)) {}

  void step(std::span<T> theta, std::span<const T> grad, double lr) {
    if (theta.size() != m_.size() || grad.size() != m_.size())
      throw PreconditionError("Adam: parameter size mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
    const T a = T(lr / bc1), s2 = T(1.0 / bc2), eps = T(cfg_.eps);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const T g = grad[i];
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g * g;
      theta[i] -= a * m_[i] / (std::sqrt(v_[i] * s2) + eps);
    }
  }

  void reset() {
    std::fill(m_.begin(), m_.end(), T(0));
    std::fill(v_.begin(), v_.end(), T(0));
    t_ = 0;
  }

  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<T> m_, v_;
  long t_ = 0;
};

}  // namespace seldde

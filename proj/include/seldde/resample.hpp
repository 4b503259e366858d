#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include "seldde/error.hpp"

namespace seldde {

/// Rational-ratio band-limited resampler (Kaiser-windowed sinc, polyphase).
///
/// The filter bank holds one set of taps per output phase; the cutoff sits at
/// `rolloff` times the lower of the two Nyquist frequencies.
class PolyphaseResampler {
 public:
  PolyphaseResampler(unsigned rate_in, unsigned rate_out, unsigned half_width = 32,
                     double rolloff = 0.94, double kaiser_beta = 8.6) {
    if (rate_in == 0 || rate_out == 0) throw PreconditionError("sample rates must be positive");
    const unsigned g = std::gcd(rate_in, rate_out);
    up_ = rate_out / g;
    down_ = rate_in / g;
    const double cutoff = rolloff * std::min(1.0, static_cast<double>(up_) / down_);
    // Taps span +-half_width zero crossings of the low-pass kernel.
    half_taps_ = static_cast<std::size_t>(std::ceil(half_width / cutoff));
    const std::size_t taps = 2 * half_taps_;
    bank_.assign(up_ * taps, 0.0);
    const double i0_beta = std::cyl_bessel_i(0.0, kaiser_beta);
    for (unsigned phase = 0; phase < up_; ++phase) {
      const double frac = static_cast<double>(phase) / up_;
      for (std::size_t j = 0; j < taps; ++j) {
        // Tap j multiplies input sample floor(t) - half_taps + 1 + j.
        const double dt = frac + static_cast<double>(half_taps_) - 1.0 - static_cast<double>(j);
        const double r = dt / static_cast<double>(half_taps_);
        double w = 0.0;
        if (std::abs(r) < 1.0)
          w = std::cyl_bessel_i(0.0, kaiser_beta * std::sqrt(1.0 - r * r)) / i0_beta;
        const double arg = cutoff * dt;
        const double sinc = arg == 0.0 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
        bank_[phase * taps + j] = cutoff * sinc * w;
      }
    }
  }

  unsigned up() const noexcept { return up_; }
  unsigned down() const noexcept { return down_; }

  std::size_t output_length(std::size_t n_in) const {
    return (n_in * up_ + down_ - 1) / down_;
  }

  template <class T>
  std::vector<T> process(std::span<const T> in) const {
    const std::size_t n_out = output_length(in.size());
    std::vector<T> out(n_out);
    const std::size_t taps = 2 * half_taps_;
    const auto n_in = static_cast<std::ptrdiff_t>(in.size());
    for (std::size_t n = 0; n < n_out; ++n) {
      const std::size_t pos = n * down_;
      const auto base = static_cast<std::ptrdiff_t>(pos / up_);
      const std::size_t phase = pos % up_;
      const double* h = &bank_[phase * taps];
      const std::ptrdiff_t first = base - static_cast<std::ptrdiff_t>(half_taps_) + 1;
      double acc = 0.0;
      for (std::size_t j = 0; j < taps; ++j) {
        const std::ptrdiff_t k = first + static_cast<std::ptrdiff_t>(j);
        if (k >= 0 && k < n_in) acc += h[j] * static_cast<double>(in[static_cast<std::size_t>(k)]);
      }
      out[n] = static_cast<T>(acc);
    }
    return out;
  }

 private:
  unsigned up_ = 1;
  unsigned down_ = 1;
  std::size_t half_taps_ = 0;
  std::vector<double> bank_;
};

}  // namespace seldde

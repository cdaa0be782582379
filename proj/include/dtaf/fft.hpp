#pragma once

#include <cmath>
#include <algorithm>
#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <numbers>
#include <span>
#include <vector>

#include "dtaf/errors.hpp"

namespace dtaf::fft {

using cd = std::complex<double>;

// Mixed-radix Cooley-Tukey for arbitrary lengths. Each level splits off the
// smallest prime factor; prime lengths fall back to a direct sum.
class Plan {
 public:
  explicit Plan(std::size_t n) : n_(n), roots_(n) {
    if (n == 0) throw ShapeError("fft length must be positive");
    for (std::size_t j = 0; j < n; ++j) {
      double a = -2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n);
      roots_[j] = cd(std::cos(a), std::sin(a));
    }
  }

  std::size_t size() const { return n_; }

  // Unnormalized transform; `inverse` flips the exponent sign only.
  void transform(std::span<cd> data, bool inverse) const {
    if (data.size() != n_) throw ShapeError("fft plan length mismatch");
    std::vector<cd> scratch(n_);
    recurse(data.data(), 1, scratch.data(), n_, inverse);
    std::copy(scratch.begin(), scratch.end(), data.begin());
  }

 private:
  // Twiddle e^{-+2 pi i t / m} for a sub-length m dividing n.
  cd twiddle(std::size_t t, std::size_t m, bool inverse) const {
    cd w = roots_[(t % m) * (n_ / m)];
    return inverse ? std::conj(w) : w;
  }

  static std::size_t smallest_factor(std::size_t m) {
    if (m % 2 == 0) return 2;
    for (std::size_t p = 3; p * p <= m; p += 2) {
      if (m % p == 0) return p;
    }
    return m;
  }

  // Transforms m elements read at `stride` from `in`, writing contiguously to `out`.
  void recurse(const cd* in, std::size_t stride, cd* out, std::size_t m, bool inverse) const {
    if (m == 1) {
      out[0] = in[0];
      return;
    }
    std::size_t p = smallest_factor(m);
    if (p == m) {
      for (std::size_t k = 0; k < m; ++k) {
        cd acc = 0.0;
        for (std::size_t r = 0; r < m; ++r) acc += in[r * stride] * twiddle(r * k, m, inverse);
        out[k] = acc;
      }
      return;
    }
    std::size_t q = m / p;
    // Sub-transforms land in out[r*q .. r*q+q).
    for (std::size_t r = 0; r < p; ++r) recurse(in + r * stride, stride * p, out + r * q, q, inverse);
    std::vector<cd> col(p);
    for (std::size_t k = 0; k < q; ++k) {
      for (std::size_t r = 0; r < p; ++r) col[r] = out[r * q + k] * twiddle(r * k, m, inverse);
      for (std::size_t s = 0; s < p; ++s) {
        cd acc = 0.0;
        for (std::size_t r = 0; r < p; ++r) acc += col[r] * twiddle(r * s * q, m, inverse);
        out[s * q + k] = acc;
      }
    }
  }

  std::size_t n_;
  std::vector<cd> roots_;
};

inline const Plan& plan_for(std::size_t n) {
  thread_local std::map<std::size_t, std::unique_ptr<Plan>> cache;
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<Plan>(n);
  return *slot;
}

inline void forward(std::span<cd> data) { plan_for(data.size()).transform(data, false); }
inline void inverse_unnormalized(std::span<cd> data) { plan_for(data.size()).transform(data, true); }

// Half spectrum (d/2+1 bins) of a real sequence of even length d.
// Bins 0 and d/2 get an exactly zero imaginary part.
inline void real_forward(std::span<const double> x, std::span<cd> bins) {
  const std::size_t d = x.size();
  if (d % 2 != 0) throw ConfigError("real fft needs an even length, got " + std::to_string(d));
  if (bins.size() != d / 2 + 1) throw ShapeError("real fft output needs d/2+1 bins");
  std::vector<cd> buf(x.begin(), x.end());
  forward(buf);
  for (std::size_t k = 0; k <= d / 2; ++k) bins[k] = buf[k];
  bins[0].imag(0.0);
  bins[d / 2].imag(0.0);
}

// Inverse of real_forward including the 1/d factor. Imaginary parts of the
// DC and Nyquist bins are ignored.
inline void real_inverse(std::span<const cd> bins, std::span<double> x) {
  const std::size_t d = x.size();
  if (d % 2 != 0) throw ConfigError("real fft needs an even length, got " + std::to_string(d));
  if (bins.size() != d / 2 + 1) {
    throw ShapeError("inverse real fft of length " + std::to_string(d) + " needs " +
                     std::to_string(d / 2 + 1) + " bins, got " + std::to_string(bins.size()));
  }
  std::vector<cd> buf(d);
  buf[0] = cd(bins[0].real(), 0.0);
  buf[d / 2] = cd(bins[d / 2].real(), 0.0);
  for (std::size_t k = 1; k < d / 2; ++k) {
    buf[k] = bins[k];
    buf[d - k] = std::conj(bins[k]);
  }
  inverse_unnormalized(buf);
  const double inv = 1.0 / static_cast<double>(d);
  for (std::size_t n = 0; n < d; ++n) x[n] = buf[n].real() * inv;
}

}  // namespace dtaf::fft

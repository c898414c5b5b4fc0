// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <stdexcept>
#include <vector>

namespace enhasr::fft {

struct Twiddles {
  std::vector<double> cos_fwd, sin_fwd;  // e^{-i 2 pi j / len} per stage layout
  std::vector<int> bitrev;
};

inline const Twiddles& tables(int n) {
  static std::mutex mu;
  static std::map<int, Twiddles> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  if (n <= 0 || (n & (n - 1)) != 0) throw std::invalid_argument("fft: size must be a power of two");
  Twiddles tw;
  tw.bitrev.resize(size_t(n));
  int bits = 0;
  while ((1 << bits) < n) ++bits;
  for (int i = 0; i < n; ++i) {
    int r = 0;
    for (int b = 0; b < bits; ++b) r |= ((i >> b) & 1) << (bits - 1 - b);
    tw.bitrev[size_t(i)] = r;
  }
  tw.cos_fwd.resize(size_t(n / 2));
  tw.sin_fwd.resize(size_t(n / 2));
  for (int j = 0; j < n / 2; ++j) {
    const double a = -2.0 * 3.14159265358979323846 * double(j) / double(n);
    tw.cos_fwd[size_t(j)] = std::cos(a);
    tw.sin_fwd[size_t(j)] = std::sin(a);
  }
  return cache.emplace(n, std::move(tw)).first->second;
}

// In-place radix-2 complex FFT, unnormalized. inverse=true conjugates the
// twiddles (still unnormalized; callers divide by n where needed).
inline void transform(std::vector<double>& re, std::vector<double>& im, bool inverse) {
  const int n = int(re.size());
  const Twiddles& tw = tables(n);
  for (int i = 0; i < n; ++i) {
    const int j = tw.bitrev[size_t(i)];
    if (j > i) {
      std::swap(re[size_t(i)], re[size_t(j)]);
      std::swap(im[size_t(i)], im[size_t(j)]);
    }
  }
  for (int len = 2; len <= n; len <<= 1) {
    const int half = len / 2;
    const int step = n / len;
    for (int base = 0; base < n; base += len) {
      for (int j = 0; j < half; ++j) {
        const double wr = tw.cos_fwd[size_t(j * step)];
        const double wi = inverse ? -tw.sin_fwd[size_t(j * step)] : tw.sin_fwd[size_t(j * step)];
        const int a = base + j, b = base + j + half;
        const double xr = re[size_t(b)] * wr - im[size_t(b)] * wi;
        const double xi = re[size_t(b)] * wi + im[size_t(b)] * wr;
        re[size_t(b)] = re[size_t(a)] - xr;
        im[size_t(b)] = im[size_t(a)] - xi;
        re[size_t(a)] += xr;
        im[size_t(a)] += xi;
      }
    }
  }
}

// Real input (length n, power of two) -> onesided bins k = 0..n/2.
inline void rfft(const double* x, int n, double* out_re, double* out_im) {
  std::vector<double> re(x, x + n), im(size_t(n), 0.0);
  transform(re, im, false);
  for (int k = 0; k <= n / 2; ++k) {
    out_re[k] = re[size_t(k)];
    out_im[k] = im[size_t(k)];
  }
}

// Hermitian inverse of rfft: imaginary parts of bins 0 and n/2 are ignored.
inline void irfft(const double* in_re, const double* in_im, int n, double* x) {
  std::vector<double> re(size_t(n), 0.0), im(size_t(n), 0.0);
  re[0] = in_re[0];
  re[size_t(n / 2)] = in_re[n / 2];
  for (int k = 1; k < n / 2; ++k) {
    re[size_t(k)] = in_re[k];
    im[size_t(k)] = in_im[k];
    re[size_t(n - k)] = in_re[k];
    im[size_t(n - k)] = -in_im[k];
  }
  transform(re, im, true);
  const double inv = 1.0 / double(n);
  for (int i = 0; i < n; ++i) x[i] = re[size_t(i)] * inv;
}

// Adjoint of rfft: time-domain gradient from onesided bin gradients.
inline void rfft_adjoint(const double* g_re, const double* g_im, int n, double* gx) {
  std::vector<double> re(size_t(n), 0.0), im(size_t(n), 0.0);
  for (int k = 0; k <= n / 2; ++k) {
    re[size_t(k)] = g_re[k];
    im[size_t(k)] = g_im[k];
  }
  transform(re, im, true);  // e^{+i theta}, unnormalized
  for (int i = 0; i < n; ++i) gx[i] = re[size_t(i)];
}

// Adjoint of irfft: bin gradients from time-domain gradient.
inline void irfft_adjoint(const double* gx, int n, double* g_re, double* g_im) {
  std::vector<double> re(gx, gx + n), im(size_t(n), 0.0);
  transform(re, im, false);
  const double inv = 1.0 / double(n);
  for (int k = 0; k <= n / 2; ++k) {
    const double c = (k == 0 || k == n / 2) ? 1.0 : 2.0;
    g_re[k] = c * inv * re[size_t(k)];
    g_im[k] = (k == 0 || k == n / 2) ? 0.0 : 2.0 * inv * im[size_t(k)];
  }
}

}  // namespace enhasr::fft

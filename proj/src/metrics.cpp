// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "enhasr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace enhasr::metrics {

double si_snr(const dsp::Waveform& est, const dsp::Waveform& ref) {
  if (est.length() != ref.length()) {
    throw std::invalid_argument("si_snr: length mismatch " + std::to_string(est.length()) + " vs " +
                                std::to_string(ref.length()));
  }
  const int n = ref.length();
  if (n == 0) throw std::invalid_argument("si_snr: empty signals");
  double me = 0.0, mr = 0.0;
  for (int i = 0; i < n; ++i) {
    me += est.samples[size_t(i)];
    mr += ref.samples[size_t(i)];
  }
  me /= n;
  mr /= n;
  double dot = 0.0, rr = 0.0;
  for (int i = 0; i < n; ++i) {
    const double e = est.samples[size_t(i)] - me;
    const double r = ref.samples[size_t(i)] - mr;
    dot += e * r;
    rr += r * r;
  }
  if (rr <= 0.0) throw std::invalid_argument("si_snr: zero reference signal");
  const double a = dot / rr;
  double target = 0.0, err = 0.0;
  for (int i = 0; i < n; ++i) {
    const double e = est.samples[size_t(i)] - me;
    const double r = ref.samples[size_t(i)] - mr;
    const double t = a * r;
    target += t * t;
    const double d = e - t;
    err += d * d;
  }
  if (err <= 0.0 || target / err > 1e6) return kSiSnrCapDb;
  return std::min(kSiSnrCapDb, 10.0 * std::log10(target / err));
}

WerBreakdown wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  if (ref.empty()) throw std::invalid_argument("wer: empty reference");
  const int m = int(ref.size()), n = int(hyp.size());
  // d[i][j]: edits aligning ref[0..i) with hyp[0..j)
  std::vector<int> d((size_t(m) + 1) * (size_t(n) + 1), 0);
  auto at = [&](int i, int j) -> int& { return d[size_t(i) * (size_t(n) + 1) + size_t(j)]; };
  for (int i = 0; i <= m; ++i) at(i, 0) = i;
  for (int j = 0; j <= n; ++j) at(0, j) = j;
  for (int i = 1; i <= m; ++i) {
    for (int j = 1; j <= n; ++j) {
      const int sub = at(i - 1, j - 1) + (ref[size_t(i - 1)] == hyp[size_t(j - 1)] ? 0 : 1);
      const int del = at(i - 1, j) + 1;
      const int ins = at(i, j - 1) + 1;
      at(i, j) = std::min({sub, del, ins});
    }
  }
  WerBreakdown b;
  b.ref_words = m;
  // backtrack, preferring the diagonal on ties
  int i = m, j = n;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const int sub = at(i - 1, j - 1) + (ref[size_t(i - 1)] == hyp[size_t(j - 1)] ? 0 : 1);
      if (sub == at(i, j)) {
        if (ref[size_t(i - 1)] != hyp[size_t(j - 1)]) ++b.substitutions;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && at(i - 1, j) + 1 == at(i, j)) {
      ++b.deletions;
      --i;
      continue;
    }
    ++b.insertions;
    --j;
  }
  b.wer = double(b.total_edits()) / double(m);
  return b;
}

WerrReport werr(double clean_base, double noisy_base, double clean_new, double noisy_new) {
  if (clean_base <= 0.0 || noisy_base <= 0.0) {
    throw std::invalid_argument("werr: baseline WERs must be positive");
  }
  WerrReport r;
  r.clean_base = clean_base;
  r.noisy_base = noisy_base;
  r.clean_new = clean_new;
  r.noisy_new = noisy_new;
  r.werr_clean = (clean_base - clean_new) / clean_base * 100.0;
  r.werr_noisy = (noisy_base - noisy_new) / noisy_base * 100.0;
  r.werr_avg = 0.5 * (r.werr_clean + r.werr_noisy);
  return r;
}

}  // namespace enhasr::metrics

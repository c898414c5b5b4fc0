// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <string>
#include <vector>

#include "enhasr/dsp.hpp"

namespace enhasr::metrics {

inline constexpr double kSiSnrCapDb = 60.0;

// Scale-invariant SNR in dB. Both signals are mean-subtracted, the estimate is
// projected onto the reference, and the residual energy is measured. Invariant
// to positive scaling of the estimate; capped at +60 dB.
double si_snr(const dsp::Waveform& est, const dsp::Waveform& ref);

struct WerBreakdown {
  int substitutions = 0;
  int deletions = 0;
  int insertions = 0;
  int ref_words = 0;
  double wer = 0.0;  // (S+D+I)/ref_words
  int total_edits() const { return substitutions + deletions + insertions; }
};

// Levenshtein alignment with unit costs; ties prefer substitution over
// insertion+deletion pairs.
WerBreakdown wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);

struct WerrReport {
  double clean_base = 0, noisy_base = 0, clean_new = 0, noisy_new = 0;  // WER percents
  double werr_clean = 0, werr_noisy = 0, werr_avg = 0;                  // percents
};

WerrReport werr(double clean_base, double noisy_base, double clean_new, double noisy_new);

}  // namespace enhasr::metrics

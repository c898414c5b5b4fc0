// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <string>

#include "enhasr/dcrn.hpp"
#include "enhasr/dsp.hpp"
#include "enhasr/rnnt.hpp"

namespace enhasr::consistency {

// The four speech variants: original, noisy, enhanced, enhanced-noisy.
struct SpeechVariantSet {
  dsp::Waveform s1;  // original
  dsp::Waveform s2;  // original + noise at noise_snr_db
  dsp::Waveform s3;  // enhanced original
  dsp::Waveform s4;  // enhanced noisy
  double noise_snr_db = 0.0;
};

// Enhancement runs detached from the enhancer parameters (augmentation mode).
SpeechVariantSet make_variants(const dsp::Waveform& s, const dsp::Waveform& n, double snr_db,
                               const dcrn::EnhancementModel& m);

enum class PairPolicy { UniformS1S3orS2S4, S3S4Only };

struct PairSample {
  const dsp::Waveform* a = nullptr;
  const dsp::Waveform* b = nullptr;
  std::string pair_id;
};

// Uniform policy returns (s1,s3) or (s2,s4) with probability 0.5 each.
PairSample sample_pair(const SpeechVariantSet& vs, Rng& rng,
                       PairPolicy policy = PairPolicy::UniformS1S3orS2S4);

// Symmetric KL between the full |Ybar| posterior distributions, averaged over
// time and label indices: (1/T) sum_t mean_u [D(Pa||Pb) + D(Pb||Pa)].
ag::Tensor g_kl_consistency(ag::Graph& g, const rnnt::PosteriorGrid& ga,
                            const rnnt::PosteriorGrid& gb);
double kl_consistency(const rnnt::PosteriorGrid& ga, const rnnt::PosteriorGrid& gb);

struct LossWeights {
  double lambda_aux = 0.5;
};

struct CombinedLoss {
  ag::Tensor total;  // 0.5*NLL_i + 0.5*NLL_j + lambda_aux*KL
  double nll_i = 0.0, nll_j = 0.0, kl = 0.0;
};

// Both branches share the RNN-T; gradients flow through both posterior grids
// and the KL term.
CombinedLoss combined_loss(ag::Graph& g, const rnnt::RnntModel& m, const ag::Tensor& feats_i,
                           const ag::Tensor& feats_j, const std::vector<int>& y,
                           const LossWeights& w);

// Convenience wrapper over raw waveforms (log-mel + normalization inside).
double combined_loss_value(const rnnt::RnntModel& m, const dsp::Waveform& si,
                           const dsp::Waveform& sj, const std::vector<int>& y,
                           const LossWeights& w);

}  // namespace enhasr::consistency

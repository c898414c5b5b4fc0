// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "enhasr/consistency.hpp"

namespace enhasr::consistency {

SpeechVariantSet make_variants(const dsp::Waveform& s, const dsp::Waveform& n, double snr_db,
                               const dcrn::EnhancementModel& m) {
  SpeechVariantSet vs;
  vs.noise_snr_db = snr_db;
  vs.s1 = s;
  vs.s2 = dsp::mix_at_snr(s, n, snr_db).mixed;
  vs.s3 = dcrn::enhance(m, vs.s1);
  vs.s4 = dcrn::enhance(m, vs.s2);
  return vs;
}

PairSample sample_pair(const SpeechVariantSet& vs, Rng& rng, PairPolicy policy) {
  if (policy == PairPolicy::S3S4Only) return {&vs.s3, &vs.s4, "s3s4"};
  if (rng.uniform() < 0.5) return {&vs.s1, &vs.s3, "s1s3"};
  return {&vs.s2, &vs.s4, "s2s4"};
}

ag::Tensor g_kl_consistency(ag::Graph& g, const rnnt::PosteriorGrid& ga,
                            const rnnt::PosteriorGrid& gb) {
  if (ga.log_probs.shape() != gb.log_probs.shape()) {
    throw std::invalid_argument("kl_consistency: grid shape mismatch " +
                                ag::shape_str(ga.log_probs.shape()) + " vs " +
                                ag::shape_str(gb.log_probs.shape()));
  }
  // sum_v (Pa - Pb) * (log Pa - log Pb) is the symmetric KL per (t,u) node
  ag::Tensor pa = g.exp(ga.log_probs);
  ag::Tensor pb = g.exp(gb.log_probs);
  ag::Tensor per_elem = g.mul(g.sub(pa, pb), g.sub(ga.log_probs, gb.log_probs));
  const double nodes = double(ga.frames) * (ga.labels + 1);
  return g.scale(g.sum(per_elem), 1.0 / nodes);
}

double kl_consistency(const rnnt::PosteriorGrid& ga, const rnnt::PosteriorGrid& gb) {
  ag::Graph g(false);
  return g_kl_consistency(g, ga, gb).item();
}

CombinedLoss combined_loss(ag::Graph& g, const rnnt::RnntModel& m, const ag::Tensor& feats_i,
                           const ag::Tensor& feats_j, const std::vector<int>& y,
                           const LossWeights& w) {
  rnnt::PosteriorGrid grid_i = rnnt::posterior_grid(g, m, feats_i, y);
  rnnt::PosteriorGrid grid_j = rnnt::posterior_grid(g, m, feats_j, y);
  ag::Tensor nll_i = rnnt::rnnt_loss(g, grid_i, y);
  ag::Tensor nll_j = rnnt::rnnt_loss(g, grid_j, y);
  ag::Tensor kl = g_kl_consistency(g, grid_i, grid_j);
  CombinedLoss out;
  out.nll_i = nll_i.item();
  out.nll_j = nll_j.item();
  out.kl = kl.item();
  out.total = g.add(g.add(g.scale(nll_i, 0.5), g.scale(nll_j, 0.5)), g.scale(kl, w.lambda_aux));
  return out;
}

double combined_loss_value(const rnnt::RnntModel& m, const dsp::Waveform& si,
                           const dsp::Waveform& sj, const std::vector<int>& y,
                           const LossWeights& w) {
  ag::Graph g(false);
  ag::Tensor fi = dsp::g_normalize(g, dsp::g_logmel(g, dsp::to_tensor(si)));
  ag::Tensor fj = dsp::g_normalize(g, dsp::g_logmel(g, dsp::to_tensor(sj)));
  return combined_loss(g, m, fi, fj, y, w).total.item();
}

}  // namespace enhasr::consistency

// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "enhasr/consistency.hpp"
#include "enhasr/corpus.hpp"
#include "enhasr/dcrn.hpp"
#include "enhasr/dsp.hpp"
#include "enhasr/metrics.hpp"
#include "enhasr/rnnt.hpp"
#include "enhasr/selection.hpp"

namespace enhasr::trainer {

// ---------------------------------------------------------------------------
// schedules and augmentation policies

struct TriStageSchedule {
  int warmup_epochs = 2;
  double peak_lr = 4e-4;
  double min_lr = 4e-6;
  int total_epochs = 20;
};

// Linear warmup from min_lr to exactly peak_lr at the first post-warmup epoch;
// the remaining epochs split into three equal parts: constant peak, then
// exponential decay reaching exactly min_lr at the final epoch.
double lr_at(const TriStageSchedule& sched, int epoch);

struct AugmentPolicy {
  double noise_prob = 0.5;
  double noise_snr_lo = 0.0, noise_snr_hi = 25.0;       // ASR noise augmentation
  double enhance_prob = 0.5;
  double enh_train_snr_lo = -5.0, enh_train_snr_hi = 5.0;  // enhancer training mixes
};

struct SpecAugmentConfig {
  int freq_masks = 2;
  int freq_width_max = 8;
  int time_masks = 2;
  int time_width_max = 4;
  double mask_value = 0.0;  // post-normalization mean
};

struct MaskBands {
  std::vector<std::pair<int, int>> time, freq;  // [start, start+width)
};
MaskBands draw_mask_bands(int frames, int dims, const SpecAugmentConfig& cfg, Rng& rng);

dsp::FeatureMatrix spec_augment(const dsp::FeatureMatrix& f, const SpecAugmentConfig& cfg, Rng& rng);
dsp::FeatureMatrix apply_mask_bands(const dsp::FeatureMatrix& f, const MaskBands& bands, double value);
ag::Tensor apply_mask_bands(ag::Graph& g, const ag::Tensor& feats, const MaskBands& bands,
                            double value);

// ---------------------------------------------------------------------------
// optimizer

struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t step_count = 0;
  std::vector<std::vector<double>> m, v;

  explicit Adam(const ag::NamedTensors& params);
  void step(const ag::NamedTensors& params, const std::vector<std::vector<double>>& grads,
            double lr);
};

// Returns the pre-clip norm; scales grads in place when above max_norm.
double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm);

// ---------------------------------------------------------------------------
// batch planning (pure, so augmentation rates are testable)

struct UttPlan {
  bool add_noise = false;
  double snr_db = 0.0;
  int noise_kind = 0;       // index into {white, babble-like, tonal}
  uint64_t noise_seed = 0;
  uint64_t rng_seed = 0;    // per-utterance stream for masks / pair sampling
};

struct BatchPlan {
  bool enhance_batch = false;
  std::vector<UttPlan> utts;
};

BatchPlan plan_batch(uint64_t seed, int epoch, int batch_idx, int batch_size,
                     const AugmentPolicy& policy);

// ---------------------------------------------------------------------------
// corpus preloaded into memory

struct LoadedCorpus {
  corpus::CorpusManifest manifest;
  std::vector<dsp::Waveform> audio;  // aligned with manifest.entries
  std::vector<int> train, valid, test_clean, test_noisy;

  static LoadedCorpus load(const std::string& manifest_path);
  static LoadedCorpus from_manifest(corpus::CorpusManifest m);
  const corpus::Utterance& utt(int i) const { return manifest.entries[size_t(i)]; }
};

dsp::FeatureMatrix asr_features(const dsp::Waveform& w);

// ---------------------------------------------------------------------------
// training

enum class KlMode { Off, UniformPairs, S3S4Only };

struct TrainOptions {
  bool augment_noise = false;
  bool augment_enhance = false;
  KlMode kl = KlMode::Off;
  double lambda_aux = 0.5;
  bool use_specaugment = true;
  SpecAugmentConfig specaug;
  bool validate_with_enhancer = false;  // validation/decoding through the frontend
  int batch_size = 8;
  int threads = 2;
  uint64_t seed = 1;
  double clip_norm = 5.0;
  int val_decode_utts = 48;
  std::string run_dir;  // when set: epoch<e>.ckpt + metrics.csv (+ kl_log.csv)
};

struct EpochStats {
  int epoch = 0;
  double lr = 0.0, train_loss = 0.0, val_loss = 0.0, val_wer = -1.0;
};

struct TrainResult {
  double best_val_loss = 0.0;
  int best_epoch = -1;
  std::vector<EpochStats> epochs;
};

TrainResult train_asr(rnnt::RnntModel& model, const LoadedCorpus& corpus,
                      const AugmentPolicy& policy, const TriStageSchedule& sched,
                      const TrainOptions& opts, const dcrn::EnhancementModel* enhancer);

TrainResult train_enhancer(dcrn::EnhancementModel& model, const LoadedCorpus& corpus,
                           const AugmentPolicy& policy, const TriStageSchedule& sched,
                           const TrainOptions& opts);

// Step 3 of the three-step scheme: joint ASR+DCRN fine-tuning at a constant
// learning rate, optionally with the (s3,s4) KL pair.
TrainResult joint_finetune(rnnt::RnntModel& asr, dcrn::EnhancementModel& enh,
                           const LoadedCorpus& corpus, const AugmentPolicy& policy, int epochs,
                           double lr, KlMode kl, const TrainOptions& opts);

struct SelectionPhases {
  int phase1_epochs = 2;
  int phase2_epochs = 2;
  double phase1_lr = 4e-4;
  double phase2_lr = 4e-6;  // "smaller learning rate", shared with step 3
};

// Phase 1 trains only the selection module (ASR + DCRN frozen); phase 2 trains
// selection + ASR with the DCRN still frozen.
TrainResult train_selection(selection::SelectionModel& sel, rnnt::RnntModel& asr,
                            const dcrn::EnhancementModel& enh, const LoadedCorpus& corpus,
                            const SelectionPhases& phases, const TrainOptions& opts);

struct ThreeStepConfig {
  AugmentPolicy policy;
  TriStageSchedule enh_sched{2, 4e-4, 4e-6, 10};
  TriStageSchedule step1_sched{2, 4e-4, 4e-6, 20};
  TriStageSchedule step2_sched{2, 4e-4, 4e-6, 10};
  int step3_epochs = 5;
  double step3_lr = 4e-6;
  KlMode step23_kl = KlMode::Off;  // S3S4Only for the combined rows (d)/(e)
  bool with_selection = false;
  SelectionPhases selection_phases;
  TrainOptions opts;
};

struct ThreeStepResult {
  rnnt::RnntModel step1;      // baseline RNN-T
  rnnt::RnntModel step2;
  rnnt::RnntModel final_asr;  // after joint fine-tuning (and selection phase 2)
  dcrn::EnhancementModel enhancer_pre;  // before step 3
  dcrn::EnhancementModel enhancer;      // after step 3
  std::optional<selection::SelectionModel> sel;
  uint64_t enh_checksum_before_step2 = 0, enh_checksum_after_step2 = 0;
};

// init_asr: starting point for step 2 (combined scheme passes the
// augmentation-trained model); when null, step 1 trains the baseline here.
ThreeStepResult three_step_train(const LoadedCorpus& corpus, const ThreeStepConfig& cfg,
                                 const rnnt::RnntConfig& asr_cfg, const dcrn::DcrnConfig& enh_cfg,
                                 const rnnt::RnntModel* init_asr = nullptr,
                                 const dcrn::EnhancementModel* init_enh = nullptr);

enum class CombinedMode { RowB, RowC, RowD, RowE };  // table-5 style variants

struct CombinedConfig {
  ThreeStepConfig steps;
  TriStageSchedule stage_a_sched{2, 4e-4, 4e-6, 20};
};

struct CombinedResult {
  rnnt::RnntModel stage_a;  // augmentation + KL trained model
  ThreeStepResult rest;
};

CombinedResult combined_train(const LoadedCorpus& corpus, CombinedMode mode,
                              const CombinedConfig& cfg, const rnnt::RnntConfig& asr_cfg,
                              const dcrn::DcrnConfig& enh_cfg);

// ---------------------------------------------------------------------------
// decoding / evaluation

struct Frontend {
  const dcrn::EnhancementModel* enhancer = nullptr;
  const selection::SelectionModel* sel = nullptr;  // requires enhancer
};

dsp::FeatureMatrix frontend_features(const Frontend& fe, const dsp::Waveform& w);
std::vector<int> transcribe(const rnnt::RnntModel& m, const Frontend& fe, const dsp::Waveform& w);

struct SplitEval {
  double wer = 0.0;  // corpus-level: total edits / total reference words
  int edits = 0, ref_words = 0, utts = 0;
  std::vector<std::pair<std::string, metrics::WerBreakdown>> per_utt;
};

SplitEval evaluate_split(const rnnt::RnntModel& m, const Frontend& fe, const LoadedCorpus& corpus,
                         corpus::Split split, int threads, int limit = -1);

void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace enhasr::trainer

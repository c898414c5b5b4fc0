// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "enhasr/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <thread>

#include "enhasr/errors.hpp"

namespace fs = std::filesystem;

namespace enhasr::trainer {

double lr_at(const TriStageSchedule& s, int epoch) {
  if (epoch < 0 || epoch >= s.total_epochs) {
    throw std::invalid_argument("lr_at: epoch " + std::to_string(epoch) + " outside [0," +
                                std::to_string(s.total_epochs) + ")");
  }
  const int w = s.warmup_epochs;
  if (epoch < w) return s.min_lr + (s.peak_lr - s.min_lr) * double(epoch) / double(w);
  const int rest = s.total_epochs - w;
  const double part = rest / 3.0;
  const double pos = double(epoch - w);
  if (rest <= 1 || pos < part) return s.peak_lr;
  const double x = (pos - part) / (double(rest - 1) - part);
  return s.peak_lr * std::pow(s.min_lr / s.peak_lr, x);
}

// ---------------------------------------------------------------------------
// SpecAugment

MaskBands draw_mask_bands(int frames, int dims, const SpecAugmentConfig& cfg, Rng& rng) {
  MaskBands bands;
  for (int i = 0; i < cfg.freq_masks && cfg.freq_width_max > 0; ++i) {
    const int w = std::min(dims, 1 + rng.uniform_int(cfg.freq_width_max));
    const int start = rng.uniform_int(dims - w + 1);
    bands.freq.emplace_back(start, w);
  }
  for (int i = 0; i < cfg.time_masks && cfg.time_width_max > 0; ++i) {
    const int w = std::min(frames, 1 + rng.uniform_int(cfg.time_width_max));
    const int start = rng.uniform_int(frames - w + 1);
    bands.time.emplace_back(start, w);
  }
  return bands;
}

dsp::FeatureMatrix apply_mask_bands(const dsp::FeatureMatrix& f, const MaskBands& bands,
                                    double value) {
  dsp::FeatureMatrix out = f;
  for (const auto& [start, w] : bands.freq) {
    for (int t = 0; t < out.frames; ++t) {
      for (int d = start; d < start + w; ++d) out.at(t, d) = value;
    }
  }
  for (const auto& [start, w] : bands.time) {
    for (int t = start; t < start + w; ++t) {
      for (int d = 0; d < out.dims; ++d) out.at(t, d) = value;
    }
  }
  return out;
}

dsp::FeatureMatrix spec_augment(const dsp::FeatureMatrix& f, const SpecAugmentConfig& cfg,
                                Rng& rng) {
  return apply_mask_bands(f, draw_mask_bands(f.frames, f.dims, cfg, rng), cfg.mask_value);
}

ag::Tensor apply_mask_bands(ag::Graph& g, const ag::Tensor& feats, const MaskBands& bands,
                            double value) {
  const int frames = feats.dim(0), dims = feats.dim(1);
  std::vector<double> keep(size_t(frames) * dims, 1.0);
  for (const auto& [start, w] : bands.freq) {
    for (int t = 0; t < frames; ++t) {
      for (int d = start; d < start + w; ++d) keep[size_t(t) * dims + d] = 0.0;
    }
  }
  for (const auto& [start, w] : bands.time) {
    for (int t = start; t < start + w; ++t) {
      for (int d = 0; d < dims; ++d) keep[size_t(t) * dims + d] = 0.0;
    }
  }
  ag::Tensor mask = ag::Tensor::from({frames, dims}, std::move(keep));
  ag::Tensor masked = g.mul(feats, mask);
  if (value == 0.0) return masked;
  std::vector<double> fill(size_t(frames) * dims);
  for (size_t i = 0; i < fill.size(); ++i) fill[i] = (1.0 - mask.data()[i]) * value;
  return g.add(masked, ag::Tensor::from({frames, dims}, std::move(fill)));
}

// ---------------------------------------------------------------------------
// optimizer

Adam::Adam(const ag::NamedTensors& params) {
  m.reserve(params.size());
  v.reserve(params.size());
  for (const auto& [name, t] : params) {
    m.emplace_back(size_t(t.size()), 0.0);
    v.emplace_back(size_t(t.size()), 0.0);
  }
}

void Adam::step(const ag::NamedTensors& params, const std::vector<std::vector<double>>& grads,
                double lr) {
  if (grads.size() != params.size()) throw std::invalid_argument("adam: gradient list mismatch");
  ++step_count;
  const double bc1 = 1.0 - std::pow(beta1, double(step_count));
  const double bc2 = 1.0 - std::pow(beta2, double(step_count));
  for (size_t p = 0; p < params.size(); ++p) {
    auto& x = const_cast<ag::Tensor&>(params[p].second).mutable_data();
    const auto& g = grads[p];
    auto& mp = m[p];
    auto& vp = v[p];
    for (size_t i = 0; i < x.size(); ++i) {
      mp[i] = beta1 * mp[i] + (1.0 - beta1) * g[i];
      vp[i] = beta2 * vp[i] + (1.0 - beta2) * g[i] * g[i];
      x[i] -= lr * (mp[i] / bc1) / (std::sqrt(vp[i] / bc2) + eps);
    }
  }
}

double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double v : g) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& g : grads) {
      for (double& v : g) v *= s;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// batch planning

BatchPlan plan_batch(uint64_t seed, int epoch, int batch_idx, int batch_size,
                     const AugmentPolicy& policy) {
  Rng rng(Rng::derive({seed, 0x42415443u, uint64_t(epoch), uint64_t(batch_idx)}));
  BatchPlan plan;
  plan.enhance_batch = rng.uniform() < policy.enhance_prob;
  plan.utts.resize(size_t(batch_size));
  for (auto& u : plan.utts) {
    u.add_noise = rng.uniform() < policy.noise_prob;
    u.snr_db = rng.uniform(policy.noise_snr_lo, policy.noise_snr_hi);
    u.noise_kind = rng.uniform_int(3);
    u.noise_seed = rng.next_u64();
    u.rng_seed = rng.next_u64();
  }
  return plan;
}

// ---------------------------------------------------------------------------
// corpus loading / features

LoadedCorpus LoadedCorpus::from_manifest(corpus::CorpusManifest m) {
  LoadedCorpus c;
  c.manifest = std::move(m);
  c.audio.reserve(c.manifest.entries.size());
  for (const auto& u : c.manifest.entries) c.audio.push_back(corpus::load_audio(c.manifest, u));
  c.train = c.manifest.split_indices(corpus::Split::Train);
  c.valid = c.manifest.split_indices(corpus::Split::Valid);
  c.test_clean = c.manifest.split_indices(corpus::Split::TestClean);
  c.test_noisy = c.manifest.split_indices(corpus::Split::TestNoisy);
  return c;
}

LoadedCorpus LoadedCorpus::load(const std::string& manifest_path) {
  return from_manifest(corpus::load_manifest(manifest_path));
}

dsp::FeatureMatrix asr_features(const dsp::Waveform& w) {
  return dsp::normalize_utterance(dsp::logmel(w));
}

void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors{size_t(threads)};
  std::vector<std::thread> pool;
  pool.reserve(size_t(threads));
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t]() {
      try {
        for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
      } catch (...) {
        errors[size_t(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------------------
// shared batch machinery

namespace {

const corpus::NoiseKind kNoiseKinds[3] = {corpus::NoiseKind::White, corpus::NoiseKind::BabbleLike,
                                          corpus::NoiseKind::Tonal};

struct UttResult {
  double loss = 0.0;
  std::vector<std::vector<double>> grads;
  // KL logging
  std::string pair_id;
  double nll_i = 0.0, nll_j = 0.0, kl = 0.0;
};

void collect_grads(ag::Graph& g, const ag::NamedTensors& params, UttResult& out) {
  out.grads.reserve(params.size());
  for (const auto& [name, t] : params) out.grads.push_back(g.grad_or_zero(t));
}

struct BestTracker {
  double best = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  std::vector<std::vector<double>> snapshot;

  void offer(double val, int epoch, const ag::NamedTensors& params) {
    if (val < best) {
      best = val;
      best_epoch = epoch;
      snapshot.clear();
      for (const auto& [name, t] : params) snapshot.push_back(t.data());
    }
  }
  void restore(const ag::NamedTensors& params) const {
    if (best_epoch < 0) return;
    for (size_t i = 0; i < params.size(); ++i) {
      const_cast<ag::Tensor&>(params[i].second).mutable_data() = snapshot[i];
    }
  }
};

std::vector<int> shuffled(std::vector<int> v, uint64_t seed) {
  Rng rng(seed);
  for (int i = int(v.size()) - 1; i > 0; --i) {
    std::swap(v[size_t(i)], v[size_t(rng.uniform_int(i + 1))]);
  }
  return v;
}

struct CsvLog {
  std::ofstream os;
  void open(const std::string& dir, const std::string& name, const std::string& header) {
    if (dir.empty()) return;
    fs::create_directories(dir);
    os.open(fs::path(dir) / name);
    os << header << "\n";
  }
  template <typename... Args>
  void row(Args&&... args) {
    if (!os.is_open()) return;
    bool first = true;
    ((os << (first ? "" : ",") << args, first = false), ...);
    os << "\n";
  }
  void comment(const std::string& text) {
    if (os.is_open()) os << "# " << text << "\n";
  }
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

void save_epoch_checkpoint(const std::string& dir, int epoch, const ag::NamedTensors& params) {
  if (dir.empty()) return;
  fs::create_directories(dir);
  ag::save_checkpoint((fs::path(dir) / ("epoch" + std::to_string(epoch) + ".ckpt")).string(),
                      params);
}

// one optimizer step over a batch of per-utterance jobs
double run_step(const ag::NamedTensors& params, Adam& adam, double lr, int n, int threads,
                double clip_norm, const std::function<UttResult(int)>& job,
                std::vector<UttResult>* keep = nullptr) {
  std::vector<UttResult> results((size_t(n)));
  parallel_for(n, threads, [&](int k) { results[size_t(k)] = job(k); });
  std::vector<std::vector<double>> sums;
  sums.reserve(params.size());
  for (const auto& [name, t] : params) sums.emplace_back(size_t(t.size()), 0.0);
  double loss = 0.0;
  for (const auto& r : results) {
    loss += r.loss;
    for (size_t p = 0; p < sums.size(); ++p) {
      const auto& g = r.grads[p];
      auto& s = sums[p];
      for (size_t i = 0; i < s.size(); ++i) s[i] += g[i];
    }
  }
  loss /= n;
  if (!std::isfinite(loss)) throw NumericError("training: non-finite batch loss");
  const double inv = 1.0 / double(n);
  for (auto& s : sums) {
    for (double& v : s) v *= inv;
  }
  clip_global_norm(sums, clip_norm);
  adam.step(params, sums, lr);
  if (keep) *keep = std::move(results);
  return loss;
}

dsp::Waveform make_noise_for(const dsp::Waveform& w, const UttPlan& plan) {
  return corpus::synth_noise(kNoiseKinds[plan.noise_kind], w.duration_s(), plan.noise_seed);
}

}  // namespace

// ---------------------------------------------------------------------------
// ASR training

namespace {

double validate_asr_nll(const rnnt::RnntModel& model, const LoadedCorpus& corpus,
                        const TrainOptions& opts, const dcrn::EnhancementModel* enhancer) {
  const auto& idxs = corpus.valid;
  if (idxs.empty()) return 0.0;
  std::vector<double> losses(idxs.size(), 0.0);
  parallel_for(int(idxs.size()), opts.threads, [&](int k) {
    const int i = idxs[size_t(k)];
    dsp::Waveform w = corpus.audio[size_t(i)];
    if (opts.validate_with_enhancer && enhancer) w = dcrn::enhance(*enhancer, w);
    dsp::FeatureMatrix f = asr_features(w);
    ag::Graph g(false);
    auto grid = rnnt::posterior_grid(g, model, dsp::to_tensor(f), corpus.utt(i).transcript);
    losses[size_t(k)] = rnnt::rnnt_loss(g, grid, corpus.utt(i).transcript).item();
  });
  double s = 0.0;
  for (double v : losses) s += v;
  return s / double(losses.size());
}

double validate_asr_wer(const rnnt::RnntModel& model, const LoadedCorpus& corpus,
                        const TrainOptions& opts, const dcrn::EnhancementModel* enhancer) {
  const int n = std::min<int>(opts.val_decode_utts, int(corpus.valid.size()));
  if (n <= 0) return -1.0;
  std::vector<int> edits(size_t(n), 0), words(size_t(n), 0);
  parallel_for(n, opts.threads, [&](int k) {
    const int i = corpus.valid[size_t(k)];
    Frontend fe;
    if (opts.validate_with_enhancer) fe.enhancer = enhancer;
    const std::vector<int> hyp = transcribe(model, fe, corpus.audio[size_t(i)]);
    const auto& vocab = corpus.manifest.vocab;
    std::vector<std::string> r, h;
    for (int id : corpus.utt(i).transcript) r.push_back(vocab.symbol_of(id));
    for (int id : hyp) h.push_back(vocab.symbol_of(id));
    const auto b = metrics::wer(r, h);
    edits[size_t(k)] = b.total_edits();
    words[size_t(k)] = b.ref_words;
  });
  int e = 0, w = 0;
  for (int k = 0; k < n; ++k) {
    e += edits[size_t(k)];
    w += words[size_t(k)];
  }
  return w > 0 ? double(e) / double(w) : -1.0;
}

}  // namespace

TrainResult train_asr(rnnt::RnntModel& model, const LoadedCorpus& corpus,
                      const AugmentPolicy& policy, const TriStageSchedule& sched,
                      const TrainOptions& opts, const dcrn::EnhancementModel* enhancer) {
  if ((opts.augment_enhance || opts.kl != KlMode::Off) && enhancer == nullptr) {
    throw std::invalid_argument(
        "train_asr: enhancement augmentation / KL consistency require a trained enhancer");
  }
  if (corpus.train.empty()) throw DataError("train_asr: empty training split");

  const ag::NamedTensors params = model.named_parameters();
  Adam adam(params);
  BestTracker best;
  TrainResult res;

  CsvLog metrics_log, kl_log;
  metrics_log.open(opts.run_dir, "metrics.csv", "epoch,lr,train_loss,val_loss,val_wer");
  if (opts.kl != KlMode::Off) {
    kl_log.open(opts.run_dir, "kl_log.csv", "step,utt,pair_id,nll_i,nll_j,kl,lambda_aux");
  }

  int64_t step = 0;
  for (int epoch = 0; epoch < sched.total_epochs; ++epoch) {
    const double lr = lr_at(sched, epoch);
    const std::vector<int> order =
        shuffled(corpus.train, Rng::derive({opts.seed, 0x4f524452u, uint64_t(epoch)}));
    double loss_sum = 0.0;
    int64_t loss_n = 0;
    for (int b = 0; b * opts.batch_size < int(order.size()); ++b) {
      const int base = b * opts.batch_size;
      const int nb = std::min<int>(opts.batch_size, int(order.size()) - base);
      const BatchPlan plan = plan_batch(opts.seed, epoch, b, nb, policy);
      std::vector<UttResult> kept;
      const double bl = run_step(
          params, adam, lr, nb, opts.threads, opts.clip_norm,
          [&](int k) -> UttResult {
            const int idx = order[size_t(base + k)];
            const auto& u = corpus.utt(idx);
            const UttPlan& up = plan.utts[size_t(k)];
            Rng urng(up.rng_seed);
            UttResult out;
            if (opts.kl == KlMode::Off) {
              dsp::Waveform w = corpus.audio[size_t(idx)];
              if (opts.augment_noise && up.add_noise) {
                w = dsp::mix_at_snr(w, make_noise_for(w, up), up.snr_db).mixed;
              }
              if (opts.augment_enhance && plan.enhance_batch) w = dcrn::enhance(*enhancer, w);
              dsp::FeatureMatrix f = asr_features(w);
              if (opts.use_specaugment) f = spec_augment(f, opts.specaug, urng);
              ag::Graph g;
              auto grid = rnnt::posterior_grid(g, model, dsp::to_tensor(f), u.transcript);
              ag::Tensor loss = rnnt::rnnt_loss(g, grid, u.transcript);
              out.loss = loss.item();
              g.backward(loss);
              collect_grads(g, params, out);
            } else {
              const dsp::Waveform& s1 = corpus.audio[size_t(idx)];
              dsp::Waveform wi, wj;
              if (opts.kl == KlMode::UniformPairs && urng.uniform() < 0.5) {
                out.pair_id = "s1s3";
                wi = s1;
                wj = dcrn::enhance(*enhancer, s1);
              } else if (opts.kl == KlMode::UniformPairs) {
                out.pair_id = "s2s4";
                wi = dsp::mix_at_snr(s1, make_noise_for(s1, up), up.snr_db).mixed;
                wj = dcrn::enhance(*enhancer, wi);
              } else {  // S3S4Only
                out.pair_id = "s3s4";
                dsp::Waveform s2 = dsp::mix_at_snr(s1, make_noise_for(s1, up), up.snr_db).mixed;
                wi = dcrn::enhance(*enhancer, s1);
                wj = dcrn::enhance(*enhancer, s2);
              }
              dsp::FeatureMatrix fi = asr_features(wi);
              dsp::FeatureMatrix fj = asr_features(wj);
              if (opts.use_specaugment) {
                // the same mask on both branches; the KL term must see the
                // enhancement difference, not the mask difference
                const MaskBands bands = draw_mask_bands(fi.frames, fi.dims, opts.specaug, urng);
                fi = apply_mask_bands(fi, bands, opts.specaug.mask_value);
                fj = apply_mask_bands(fj, bands, opts.specaug.mask_value);
              }
              ag::Graph g;
              auto cl = consistency::combined_loss(g, model, dsp::to_tensor(fi), dsp::to_tensor(fj),
                                                   u.transcript, {opts.lambda_aux});
              out.loss = cl.total.item();
              out.nll_i = cl.nll_i;
              out.nll_j = cl.nll_j;
              out.kl = cl.kl;
              g.backward(cl.total);
              collect_grads(g, params, out);
            }
            return out;
          },
          opts.kl != KlMode::Off ? &kept : nullptr);
      ++step;
      loss_sum += bl * nb;
      loss_n += nb;
      for (int k = 0; k < int(kept.size()); ++k) {
        kl_log.row(step, corpus.utt(order[size_t(base + k)]).id, kept[size_t(k)].pair_id,
                   fmt(kept[size_t(k)].nll_i), fmt(kept[size_t(k)].nll_j), fmt(kept[size_t(k)].kl),
                   fmt(opts.lambda_aux));
      }
    }
    EpochStats st;
    st.epoch = epoch;
    st.lr = lr;
    st.train_loss = loss_sum / double(loss_n);
    st.val_loss = validate_asr_nll(model, corpus, opts, enhancer);
    st.val_wer = validate_asr_wer(model, corpus, opts, enhancer);
    res.epochs.push_back(st);
    metrics_log.row(st.epoch, fmt(st.lr), fmt(st.train_loss), fmt(st.val_loss),
                    st.val_wer < 0 ? std::string("-") : fmt(st.val_wer));
    save_epoch_checkpoint(opts.run_dir, epoch, params);
    best.offer(st.val_loss, epoch, params);
  }
  best.restore(params);
  res.best_val_loss = best.best;
  res.best_epoch = best.best_epoch;
  return res;
}

// ---------------------------------------------------------------------------
// enhancer training

TrainResult train_enhancer(dcrn::EnhancementModel& model, const LoadedCorpus& corpus,
                           const AugmentPolicy& policy, const TriStageSchedule& sched,
                           const TrainOptions& opts) {
  if (corpus.train.empty()) throw DataError("train_enhancer: empty training split");
  const ag::NamedTensors params = model.named_parameters();
  Adam adam(params);
  BestTracker best;
  TrainResult res;
  CsvLog metrics_log;
  metrics_log.open(opts.run_dir, "metrics.csv", "epoch,lr,train_loss,val_loss,val_wer");

  const dsp::StftConfig cfg = model.config.stft;
  auto validate = [&]() {
    const auto& idxs = corpus.valid;
    if (idxs.empty()) return 0.0;
    std::vector<double> losses(idxs.size(), 0.0);
    parallel_for(int(idxs.size()), opts.threads, [&](int k) {
      const int i = idxs[size_t(k)];
      const dsp::Waveform& s = corpus.audio[size_t(i)];
      // fixed validation mixes at 0 dB so epochs are comparable
      dsp::Waveform n =
          corpus::synth_noise(kNoiseKinds[k % 3], s.duration_s(),
                              Rng::derive({opts.seed, 0x454e56u, uint64_t(i)}));
      dsp::Waveform x = dsp::mix_at_snr(s, n, 0.0).mixed;
      losses[size_t(k)] =
          dcrn::enhancement_loss(dcrn::dcrn_forward(model, dsp::stft(x, cfg)), dsp::stft(s, cfg));
    });
    double t = 0.0;
    for (double v : losses) t += v;
    return t / double(losses.size());
  };

  for (int epoch = 0; epoch < sched.total_epochs; ++epoch) {
    const double lr = lr_at(sched, epoch);
    const std::vector<int> order =
        shuffled(corpus.train, Rng::derive({opts.seed, 0x454e4852u, uint64_t(epoch)}));
    double loss_sum = 0.0;
    int64_t loss_n = 0;
    for (int b = 0; b * opts.batch_size < int(order.size()); ++b) {
      const int base = b * opts.batch_size;
      const int nb = std::min<int>(opts.batch_size, int(order.size()) - base);
      const double bl = run_step(params, adam, lr, nb, opts.threads, opts.clip_norm, [&](int k) {
        const int idx = order[size_t(base + k)];
        Rng urng(Rng::derive({opts.seed, 0x454e55u, uint64_t(epoch), uint64_t(base + k)}));
        const dsp::Waveform& s = corpus.audio[size_t(idx)];
        dsp::Waveform n = corpus::synth_noise(kNoiseKinds[urng.uniform_int(3)], s.duration_s(),
                                              urng.next_u64());
        const double snr = urng.uniform(policy.enh_train_snr_lo, policy.enh_train_snr_hi);
        dsp::Waveform x = dsp::mix_at_snr(s, n, snr).mixed;
        UttResult out;
        ag::Graph g;
        ag::Tensor est = dcrn::dcrn_forward(g, model, dsp::to_tensor(dsp::stft(x, cfg)));
        ag::Tensor loss = dcrn::g_enhancement_loss(g, est, dsp::to_tensor(dsp::stft(s, cfg)));
        out.loss = loss.item();
        g.backward(loss);
        collect_grads(g, params, out);
        return out;
      });
      loss_sum += bl * nb;
      loss_n += nb;
    }
    EpochStats st;
    st.epoch = epoch;
    st.lr = lr;
    st.train_loss = loss_sum / double(loss_n);
    st.val_loss = validate();
    res.epochs.push_back(st);
    metrics_log.row(st.epoch, fmt(st.lr), fmt(st.train_loss), fmt(st.val_loss), "-");
    save_epoch_checkpoint(opts.run_dir, epoch, params);
    best.offer(st.val_loss, epoch, params);
  }
  best.restore(params);
  res.best_val_loss = best.best;
  res.best_epoch = best.best_epoch;
  return res;
}

// ---------------------------------------------------------------------------
// step 3: joint fine-tuning

TrainResult joint_finetune(rnnt::RnntModel& asr, dcrn::EnhancementModel& enh,
                           const LoadedCorpus& corpus, const AugmentPolicy& policy, int epochs,
                           double lr, KlMode kl, const TrainOptions& opts) {
  if (kl == KlMode::UniformPairs) {
    // step 2/3 operate on enhanced utterances only, so (s1,s3)/(s2,s4) pairs
    // are unavailable here
    throw std::invalid_argument("joint_finetune: only the (s3,s4) KL pair is available");
  }
  ag::NamedTensors params;
  for (auto& [n, t] : asr.named_parameters()) params.emplace_back("asr." + n, t);
  for (auto& [n, t] : enh.named_parameters()) params.emplace_back("enh." + n, t);
  Adam adam(params);
  BestTracker best;
  TrainResult res;
  CsvLog metrics_log;
  metrics_log.open(opts.run_dir, "metrics.csv", "epoch,lr,train_loss,val_loss,val_wer");

  TrainOptions vopts = opts;
  vopts.validate_with_enhancer = true;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    const std::vector<int> order =
        shuffled(corpus.train, Rng::derive({opts.seed, 0x4a4f494eu, uint64_t(epoch)}));
    double loss_sum = 0.0;
    int64_t loss_n = 0;
    for (int b = 0; b * opts.batch_size < int(order.size()); ++b) {
      const int base = b * opts.batch_size;
      const int nb = std::min<int>(opts.batch_size, int(order.size()) - base);
      const BatchPlan plan = plan_batch(opts.seed, epoch, b, nb, policy);
      const double bl = run_step(params, adam, lr, nb, opts.threads, opts.clip_norm, [&](int k) {
        const int idx = order[size_t(base + k)];
        const auto& u = corpus.utt(idx);
        const UttPlan& up = plan.utts[size_t(k)];
        Rng urng(up.rng_seed);
        const dsp::Waveform& s1 = corpus.audio[size_t(idx)];
        UttResult out;
        ag::Graph g;
        if (kl == KlMode::S3S4Only) {
          dsp::Waveform s2 = dsp::mix_at_snr(s1, make_noise_for(s1, up), up.snr_db).mixed;
          ag::Tensor e1 = dcrn::g_enhance(g, enh, dsp::to_tensor(s1));
          ag::Tensor e2 = dcrn::g_enhance(g, enh, dsp::to_tensor(s2));
          ag::Tensor fi = dsp::g_normalize(g, dsp::g_logmel(g, e1));
          ag::Tensor fj = dsp::g_normalize(g, dsp::g_logmel(g, e2));
          if (opts.use_specaugment) {
            const MaskBands bands = draw_mask_bands(fi.dim(0), fi.dim(1), opts.specaug, urng);
            fi = apply_mask_bands(g, fi, bands, opts.specaug.mask_value);
            fj = apply_mask_bands(g, fj, bands, opts.specaug.mask_value);
          }
          auto cl = consistency::combined_loss(g, asr, fi, fj, u.transcript, {opts.lambda_aux});
          out.loss = cl.total.item();
          g.backward(cl.total);
        } else {
          ag::Tensor e1 = dcrn::g_enhance(g, enh, dsp::to_tensor(s1));
          ag::Tensor f = dsp::g_normalize(g, dsp::g_logmel(g, e1));
          if (opts.use_specaugment) {
            const MaskBands bands = draw_mask_bands(f.dim(0), f.dim(1), opts.specaug, urng);
            f = apply_mask_bands(g, f, bands, opts.specaug.mask_value);
          }
          auto grid = rnnt::posterior_grid(g, asr, f, u.transcript);
          ag::Tensor loss = rnnt::rnnt_loss(g, grid, u.transcript);
          out.loss = loss.item();
          g.backward(loss);
        }
        collect_grads(g, params, out);
        return out;
      });
      loss_sum += bl * nb;
      loss_n += nb;
    }
    EpochStats st;
    st.epoch = epoch;
    st.lr = lr;
    st.train_loss = loss_sum / double(loss_n);
    st.val_loss = validate_asr_nll(asr, corpus, vopts, &enh);
    st.val_wer = validate_asr_wer(asr, corpus, vopts, &enh);
    res.epochs.push_back(st);
    metrics_log.row(st.epoch, fmt(st.lr), fmt(st.train_loss), fmt(st.val_loss),
                    st.val_wer < 0 ? std::string("-") : fmt(st.val_wer));
    save_epoch_checkpoint(opts.run_dir, epoch, params);
    best.offer(st.val_loss, epoch, params);
  }
  best.restore(params);
  res.best_val_loss = best.best;
  res.best_epoch = best.best_epoch;
  return res;
}

// ---------------------------------------------------------------------------
// selection training

TrainResult train_selection(selection::SelectionModel& sel, rnnt::RnntModel& asr,
                            const dcrn::EnhancementModel& enh, const LoadedCorpus& corpus,
                            const SelectionPhases& phases, const TrainOptions& opts) {
  TrainResult res;
  CsvLog metrics_log;
  metrics_log.open(opts.run_dir, "metrics.csv", "epoch,lr,train_loss,val_loss,val_wer");

  auto validate = [&]() {
    const auto& idxs = corpus.valid;
    if (idxs.empty()) return 0.0;
    std::vector<double> losses(idxs.size(), 0.0);
    parallel_for(int(idxs.size()), opts.threads, [&](int k) {
      const int i = idxs[size_t(k)];
      Frontend fe{&enh, &sel};
      dsp::FeatureMatrix f = frontend_features(fe, corpus.audio[size_t(i)]);
      ag::Graph g(false);
      auto grid = rnnt::posterior_grid(g, asr, dsp::to_tensor(f), corpus.utt(i).transcript);
      losses[size_t(k)] = rnnt::rnnt_loss(g, grid, corpus.utt(i).transcript).item();
    });
    double t = 0.0;
    for (double v : losses) t += v;
    return t / double(losses.size());
  };

  int epoch_counter = 0;
  auto run_phase = [&](int phase, int epochs, double lr, const ag::NamedTensors& params) {
    metrics_log.comment("phase " + std::to_string(phase) + " begins (lr " + fmt(lr) + ")");
    Adam adam(params);
    BestTracker best;
    for (int e = 0; e < epochs; ++e, ++epoch_counter) {
      const std::vector<int> order = shuffled(
          corpus.train, Rng::derive({opts.seed, 0x53454c50u, uint64_t(phase), uint64_t(e)}));
      double loss_sum = 0.0;
      int64_t loss_n = 0;
      for (int b = 0; b * opts.batch_size < int(order.size()); ++b) {
        const int base = b * opts.batch_size;
        const int nb = std::min<int>(opts.batch_size, int(order.size()) - base);
        const double bl = run_step(params, adam, lr, nb, opts.threads, opts.clip_norm, [&](int k) {
          const int idx = order[size_t(base + k)];
          const auto& u = corpus.utt(idx);
          Rng urng(Rng::derive({opts.seed, 0x53454c55u, uint64_t(phase), uint64_t(e),
                                uint64_t(base + k)}));
          const dsp::Waveform& w = corpus.audio[size_t(idx)];
          dsp::FeatureMatrix a = asr_features(w);
          dsp::FeatureMatrix ahat = asr_features(dcrn::enhance(enh, w));  // DCRN frozen
          UttResult out;
          ag::Graph g;
          ag::Tensor ta = dsp::to_tensor(a);
          ag::Tensor tahat = dsp::to_tensor(ahat);
          ag::Tensor p = selection_forward(g, sel, ta, tahat);
          ag::Tensor abar = selection::select_features(g, p, ta, tahat);
          if (opts.use_specaugment) {
            const MaskBands bands = draw_mask_bands(abar.dim(0), abar.dim(1), opts.specaug, urng);
            abar = apply_mask_bands(g, abar, bands, opts.specaug.mask_value);
          }
          auto grid = rnnt::posterior_grid(g, asr, abar, u.transcript);
          ag::Tensor loss = rnnt::rnnt_loss(g, grid, u.transcript);
          out.loss = loss.item();
          g.backward(loss);
          collect_grads(g, params, out);
          return out;
        });
        loss_sum += bl * nb;
        loss_n += nb;
      }
      EpochStats st;
      st.epoch = epoch_counter;
      st.lr = lr;
      st.train_loss = loss_sum / double(loss_n);
      st.val_loss = validate();
      res.epochs.push_back(st);
      metrics_log.row(st.epoch, fmt(st.lr), fmt(st.train_loss), fmt(st.val_loss), "-");
      best.offer(st.val_loss, epoch_counter, params);
    }
    best.restore(params);
    if (best.best_epoch >= 0) res.best_val_loss = best.best;
  };

  run_phase(1, phases.phase1_epochs, phases.phase1_lr, sel.named_parameters());
  ag::NamedTensors phase2;
  for (auto& [n, t] : sel.named_parameters()) phase2.emplace_back("sel." + n, t);
  for (auto& [n, t] : asr.named_parameters()) phase2.emplace_back("asr." + n, t);
  run_phase(2, phases.phase2_epochs, phases.phase2_lr, phase2);
  return res;
}

// ---------------------------------------------------------------------------
// protocols

ThreeStepResult three_step_train(const LoadedCorpus& corpus, const ThreeStepConfig& cfg,
                                 const rnnt::RnntConfig& asr_cfg, const dcrn::DcrnConfig& enh_cfg,
                                 const rnnt::RnntModel* init_asr,
                                 const dcrn::EnhancementModel* init_enh) {
  auto subdir = [&](const char* name) {
    TrainOptions o = cfg.opts;
    if (!o.run_dir.empty()) o.run_dir = (fs::path(o.run_dir) / name).string();
    return o;
  };

  ThreeStepResult r;
  // Step 1: RNN-T on original utterances, DCRN on clean/noisy pairs
  dcrn::EnhancementModel enh =
      init_enh ? dcrn::clone(*init_enh) : dcrn::build_dcrn(enh_cfg, cfg.opts.seed);
  if (!init_enh) train_enhancer(enh, corpus, cfg.policy, cfg.enh_sched, subdir("step1-enh"));

  rnnt::RnntModel base =
      init_asr ? rnnt::clone(*init_asr) : rnnt::build_rnnt(asr_cfg, cfg.opts.seed);
  if (!init_asr) {
    TrainOptions o1 = subdir("step1");
    train_asr(base, corpus, cfg.policy, cfg.step1_sched, o1, nullptr);
  }
  r.step1 = rnnt::clone(base);
  r.enhancer_pre = dcrn::clone(enh);

  // Step 2: RNN-T on enhanced utterances, initialized from step 1; DCRN frozen
  r.enh_checksum_before_step2 = ag::params_checksum(enh.named_parameters());
  rnnt::RnntModel m2 = rnnt::clone(base);
  {
    TrainOptions o2 = subdir("step2");
    o2.augment_enhance = true;
    o2.validate_with_enhancer = true;
    o2.kl = cfg.step23_kl;
    AugmentPolicy p2 = cfg.policy;
    p2.enhance_prob = 1.0;  // every batch is enhanced in step 2
    train_asr(m2, corpus, p2, cfg.step2_sched, o2, &enh);
  }
  r.enh_checksum_after_step2 = ag::params_checksum(enh.named_parameters());
  r.step2 = rnnt::clone(m2);

  // Step 3: joint fine-tuning at a constant small learning rate
  {
    TrainOptions o3 = subdir("step3");
    o3.kl = cfg.step23_kl;
    joint_finetune(m2, enh, corpus, cfg.policy, cfg.step3_epochs, cfg.step3_lr, cfg.step23_kl, o3);
  }

  if (cfg.with_selection) {
    selection::SelectionModel sel = selection::build_selection(dsp::kNumMels, cfg.opts.seed);
    TrainOptions os = subdir("selection");
    train_selection(sel, m2, enh, corpus, cfg.selection_phases, os);
    r.sel = std::move(sel);
  }
  r.final_asr = std::move(m2);
  r.enhancer = std::move(enh);
  return r;
}

CombinedResult combined_train(const LoadedCorpus& corpus, CombinedMode mode,
                              const CombinedConfig& cfg, const rnnt::RnntConfig& asr_cfg,
                              const dcrn::DcrnConfig& enh_cfg) {
  auto subdir = [&](const char* name) {
    TrainOptions o = cfg.steps.opts;
    if (!o.run_dir.empty()) o.run_dir = (fs::path(o.run_dir) / name).string();
    return o;
  };
  // the enhancer is needed both for stage (a) augmentation and the frontend
  dcrn::EnhancementModel enh = dcrn::build_dcrn(enh_cfg, cfg.steps.opts.seed);
  train_enhancer(enh, corpus, cfg.steps.policy, cfg.steps.enh_sched, subdir("enh"));

  rnnt::RnntModel stage_a = rnnt::build_rnnt(asr_cfg, cfg.steps.opts.seed);
  {
    TrainOptions oa = subdir("stage-a");
    oa.augment_noise = true;
    oa.augment_enhance = true;
    oa.kl = KlMode::UniformPairs;
    train_asr(stage_a, corpus, cfg.steps.policy, cfg.stage_a_sched, oa, &enh);
  }

  ThreeStepConfig steps = cfg.steps;
  steps.step23_kl =
      (mode == CombinedMode::RowD || mode == CombinedMode::RowE) ? KlMode::S3S4Only : KlMode::Off;
  steps.with_selection = (mode == CombinedMode::RowC || mode == CombinedMode::RowE);

  CombinedResult out{rnnt::clone(stage_a),
                     three_step_train(corpus, steps, asr_cfg, enh_cfg, &stage_a, &enh)};
  return out;
}

// ---------------------------------------------------------------------------
// decoding / evaluation

dsp::FeatureMatrix frontend_features(const Frontend& fe, const dsp::Waveform& w) {
  if (fe.sel) {
    if (!fe.enhancer) throw std::invalid_argument("frontend: selection requires an enhancer");
    dsp::FeatureMatrix a = asr_features(w);
    dsp::FeatureMatrix ahat = asr_features(dcrn::enhance(*fe.enhancer, w));
    dsp::FeatureMatrix p = selection::selection_mask(*fe.sel, a, ahat);
    return selection::select_features(p, a, ahat);
  }
  if (fe.enhancer) return asr_features(dcrn::enhance(*fe.enhancer, w));
  return asr_features(w);
}

std::vector<int> transcribe(const rnnt::RnntModel& m, const Frontend& fe, const dsp::Waveform& w) {
  return rnnt::greedy_decode(m, frontend_features(fe, w));
}

SplitEval evaluate_split(const rnnt::RnntModel& m, const Frontend& fe, const LoadedCorpus& corpus,
                         corpus::Split split, int threads, int limit) {
  std::vector<int> idxs = corpus.manifest.split_indices(split);
  if (limit >= 0 && int(idxs.size()) > limit) idxs.resize(size_t(limit));
  SplitEval ev;
  ev.utts = int(idxs.size());
  ev.per_utt.resize(idxs.size());
  parallel_for(int(idxs.size()), threads, [&](int k) {
    const int i = idxs[size_t(k)];
    const auto& vocab = corpus.manifest.vocab;
    const std::vector<int> hyp = transcribe(m, fe, corpus.audio[size_t(i)]);
    std::vector<std::string> r, h;
    for (int id : corpus.utt(i).transcript) r.push_back(vocab.symbol_of(id));
    for (int id : hyp) h.push_back(vocab.symbol_of(id));
    ev.per_utt[size_t(k)] = {corpus.utt(i).id, metrics::wer(r, h)};
  });
  for (const auto& [id, b] : ev.per_utt) {
    ev.edits += b.total_edits();
    ev.ref_words += b.ref_words;
  }
  ev.wer = ev.ref_words > 0 ? double(ev.edits) / double(ev.ref_words) : 0.0;
  return ev;
}

}  // namespace enhasr::trainer

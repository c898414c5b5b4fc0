// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Command-line surface: corpus synthesis, the training protocols, enhancement,
// decoding, scoring, and a couple of self-check utilities.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "CLI11.hpp"
#include "enhasr/config.hpp"
#include "enhasr/consistency.hpp"
#include "enhasr/corpus.hpp"
#include "enhasr/dcrn.hpp"
#include "enhasr/errors.hpp"
#include "enhasr/metrics.hpp"
#include "enhasr/rnnt.hpp"
#include "enhasr/selection.hpp"
#include "enhasr/trainer.hpp"

namespace fs = std::filesystem;
using namespace enhasr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

// ---------------------------------------------------------------------------
// shared option plumbing

struct CommonOpts {
  std::string config_path;
  std::string preset;
  std::string presets_dir = "presets";
  int threads = 2;
};

config::Config load_config(const CommonOpts& common) {
  if (!common.config_path.empty()) return config::Config::load(common.config_path);
  if (!common.preset.empty()) {
    const char* env = std::getenv("ENHASR_PRESETS");
    const fs::path dir = env ? fs::path(env) : fs::path(common.presets_dir);
    return config::Config::load((dir / (common.preset + ".ini")).string());
  }
  return config::Config::from_string("");
}

trainer::AugmentPolicy policy_from(config::Config& cfg);
trainer::TrainOptions options_from(config::Config& cfg, const CommonOpts& common);
trainer::TriStageSchedule schedule_from(config::Config& cfg, const std::string& prefix,
                                        int default_epochs);

// One config file drives a whole run, so every command validates against the
// full schema: it consumes all known keys and rejects whatever remains.
void reject_unknown_keys(config::Config& cfg, const CommonOpts& common) {
  (void)policy_from(cfg);
  (void)options_from(cfg, common);
  for (const char* sched : {"enhancer", "asr", "step2", "stage_a"}) {
    (void)schedule_from(cfg, sched, 1);
  }
  (void)cfg.get_str("corpus.manifest", "");
  (void)cfg.get_str("rnnt.preset", "");
  (void)cfg.get_u64("rnnt.seed", 0);
  (void)cfg.get_str("dcrn.preset", "");
  (void)cfg.get_u64("dcrn.seed", 0);
  (void)cfg.get_int("step3.epochs", 0);
  (void)cfg.get_double("step3.lr", 0);
  (void)cfg.get_int("selection.phase1_epochs", 0);
  (void)cfg.get_int("selection.phase2_epochs", 0);
  (void)cfg.get_double("selection.phase1_lr", 0);
  (void)cfg.get_double("selection.phase2_lr", 0);
  const auto leftovers = cfg.unconsumed();
  if (!leftovers.empty()) {
    std::string msg = "unknown config keys:";
    for (const auto& k : leftovers) msg += " " + k;
    throw std::invalid_argument(msg);
  }
}

dcrn::DcrnConfig dcrn_preset(const std::string& name) {
  if (name == "paper") return dcrn::DcrnConfig::paper();
  if (name == "toy") return dcrn::DcrnConfig::toy();
  if (name == "tiny") return dcrn::DcrnConfig::tiny();
  throw std::invalid_argument("unknown dcrn preset '" + name + "' (paper|toy|tiny)");
}

rnnt::RnntConfig rnnt_preset(const std::string& name, int vocab_with_blank) {
  if (name == "paper") return rnnt::RnntConfig::paper(vocab_with_blank);
  if (name == "desk") return rnnt::RnntConfig::desk(vocab_with_blank);
  throw std::invalid_argument("unknown rnnt preset '" + name + "' (paper|desk)");
}

trainer::AugmentPolicy policy_from(config::Config& cfg) {
  trainer::AugmentPolicy p;
  p.noise_prob = cfg.get_double("policy.noise_prob", p.noise_prob);
  p.noise_snr_lo = cfg.get_double("policy.noise_snr_lo", p.noise_snr_lo);
  p.noise_snr_hi = cfg.get_double("policy.noise_snr_hi", p.noise_snr_hi);
  p.enhance_prob = cfg.get_double("policy.enhance_prob", p.enhance_prob);
  p.enh_train_snr_lo = cfg.get_double("policy.enh_snr_lo", p.enh_train_snr_lo);
  p.enh_train_snr_hi = cfg.get_double("policy.enh_snr_hi", p.enh_train_snr_hi);
  return p;
}

trainer::TrainOptions options_from(config::Config& cfg, const CommonOpts& common) {
  trainer::TrainOptions o;
  o.seed = cfg.get_u64("trainer.seed", 1);
  o.threads = common.threads;
  o.batch_size = cfg.get_int("trainer.batch_size", 8);
  o.lambda_aux = cfg.get_double("trainer.lambda_aux", 0.5);
  o.clip_norm = cfg.get_double("trainer.clip_norm", 5.0);
  o.use_specaugment = cfg.get_bool("specaugment.enabled", true);
  o.specaug.freq_masks = cfg.get_int("specaugment.freq_masks", o.specaug.freq_masks);
  o.specaug.freq_width_max = cfg.get_int("specaugment.freq_width_max", o.specaug.freq_width_max);
  o.specaug.time_masks = cfg.get_int("specaugment.time_masks", o.specaug.time_masks);
  o.specaug.time_width_max = cfg.get_int("specaugment.time_width_max", o.specaug.time_width_max);
  o.run_dir = cfg.get_str("run.dir", "");
  return o;
}

trainer::TriStageSchedule schedule_from(config::Config& cfg, const std::string& prefix,
                                        int default_epochs) {
  trainer::TriStageSchedule s;
  s.warmup_epochs = cfg.get_int(prefix + ".warmup", 2);
  s.peak_lr = cfg.get_double(prefix + ".peak_lr", 4e-4);
  s.min_lr = cfg.get_double(prefix + ".min_lr", 4e-6);
  s.total_epochs = cfg.get_int(prefix + ".epochs", default_epochs);
  return s;
}

trainer::LoadedCorpus corpus_from(config::Config& cfg, const std::string& flag_manifest) {
  const std::string manifest =
      !flag_manifest.empty() ? flag_manifest : cfg.get_str("corpus.manifest", "");
  if (manifest.empty()) throw std::invalid_argument("no corpus manifest given (corpus.manifest)");
  return trainer::LoadedCorpus::load(manifest);
}

void save_model(const std::string& path, const ag::NamedTensors& params) {
  fs::create_directories(fs::path(path).parent_path().empty() ? "." : fs::path(path).parent_path().string());
  ag::save_checkpoint(path, params);
  std::cout << "wrote " << path << "\n";
}

dcrn::EnhancementModel load_enhancer(const std::string& ckpt, const std::string& preset,
                                     uint64_t seed) {
  auto m = dcrn::build_dcrn(dcrn_preset(preset), seed);
  if (!ckpt.empty()) ag::load_checkpoint_into(ckpt, m.named_parameters());
  return m;
}

rnnt::RnntModel load_asr(const std::string& ckpt, const std::string& preset, int vocab,
                         uint64_t seed) {
  auto m = rnnt::build_rnnt(rnnt_preset(preset, vocab), seed);
  if (!ckpt.empty()) ag::load_checkpoint_into(ckpt, m.named_parameters());
  return m;
}

std::string fmt_pct(double frac) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", frac * 100.0);
  return buf;
}

// ---------------------------------------------------------------------------
// subcommand bodies

int cmd_synth_data(const std::string& out, int utts, int vocab, uint64_t seed, int min_len,
                   int max_len) {
  corpus::SynthSpec spec;
  spec.n_utts = utts;
  spec.vocab_size = vocab;
  spec.seed = seed;
  spec.min_len = min_len;
  spec.max_len = max_len;
  auto m = corpus::synth_corpus(spec, out);
  std::cout << "wrote " << m.entries.size() << " utterances under " << out << "\n"
            << "manifest: " << (fs::path(out) / "manifest.tsv").string() << "\n";
  return kExitOk;
}

int cmd_train_enhancer(CommonOpts& common, const std::string& manifest, const std::string& out) {
  auto cfg = load_config(common);
  auto corpus = corpus_from(cfg, manifest);
  auto policy = policy_from(cfg);
  auto opts = options_from(cfg, common);
  auto sched = schedule_from(cfg, "enhancer", 10);
  const std::string preset = cfg.get_str("dcrn.preset", "tiny");
  const uint64_t mseed = cfg.get_u64("dcrn.seed", opts.seed);
  reject_unknown_keys(cfg, common);

  auto model = dcrn::build_dcrn(dcrn_preset(preset), mseed);
  auto res = trainer::train_enhancer(model, corpus, policy, sched, opts);
  std::cout << "best val loss " << res.best_val_loss << " at epoch " << res.best_epoch << "\n";
  save_model(out.empty() ? (opts.run_dir.empty() ? "enhancer.ckpt" : opts.run_dir + "/enhancer.ckpt")
                         : out,
             model.named_parameters());
  return kExitOk;
}

int cmd_train_asr(CommonOpts& common, const std::string& manifest, const std::string& out,
                  bool augment_noise, bool augment_enhance, const std::string& kl,
                  const std::string& enhancer_ckpt, const std::string& init_from) {
  auto cfg = load_config(common);
  auto corpus = corpus_from(cfg, manifest);
  auto policy = policy_from(cfg);
  auto opts = options_from(cfg, common);
  auto sched = schedule_from(cfg, "asr", 20);
  const std::string rnnt_name = cfg.get_str("rnnt.preset", "desk");
  const std::string dcrn_name = cfg.get_str("dcrn.preset", "tiny");
  const uint64_t mseed = cfg.get_u64("rnnt.seed", opts.seed);
  reject_unknown_keys(cfg, common);

  opts.augment_noise = augment_noise;
  opts.augment_enhance = augment_enhance;
  if (kl == "uniform") opts.kl = trainer::KlMode::UniformPairs;
  else if (kl == "s3s4") opts.kl = trainer::KlMode::S3S4Only;
  else if (kl != "off") throw std::invalid_argument("--kl must be off|uniform|s3s4");

  std::optional<dcrn::EnhancementModel> enh;
  if (!enhancer_ckpt.empty()) enh = load_enhancer(enhancer_ckpt, dcrn_name, mseed);

  auto model = load_asr(init_from, rnnt_name, corpus.manifest.vocab.size_with_blank(), mseed);
  auto res = trainer::train_asr(model, corpus, policy, sched, opts, enh ? &*enh : nullptr);
  std::cout << "best val loss " << res.best_val_loss << " at epoch " << res.best_epoch << "\n";
  save_model(out.empty() ? (opts.run_dir.empty() ? "asr.ckpt" : opts.run_dir + "/asr.ckpt") : out,
             model.named_parameters());
  return kExitOk;
}

trainer::ThreeStepConfig three_step_config(config::Config& cfg, const CommonOpts& common) {
  trainer::ThreeStepConfig c;
  c.policy = policy_from(cfg);
  c.opts = options_from(cfg, common);
  c.enh_sched = schedule_from(cfg, "enhancer", 10);
  c.step1_sched = schedule_from(cfg, "asr", 20);
  c.step2_sched = schedule_from(cfg, "step2", 10);
  c.step3_epochs = cfg.get_int("step3.epochs", 5);
  c.step3_lr = cfg.get_double("step3.lr", 4e-6);
  c.selection_phases.phase1_epochs = cfg.get_int("selection.phase1_epochs", 2);
  c.selection_phases.phase2_epochs = cfg.get_int("selection.phase2_epochs", 2);
  c.selection_phases.phase1_lr = cfg.get_double("selection.phase1_lr", 4e-4);
  c.selection_phases.phase2_lr = cfg.get_double("selection.phase2_lr", 4e-6);
  return c;
}

void report_and_save_models(const trainer::ThreeStepResult& r, const std::string& out_dir) {
  fs::create_directories(out_dir);
  ag::save_checkpoint(out_dir + "/asr_step1.ckpt", r.step1.named_parameters());
  ag::save_checkpoint(out_dir + "/asr_step2.ckpt", r.step2.named_parameters());
  ag::save_checkpoint(out_dir + "/asr_final.ckpt", r.final_asr.named_parameters());
  ag::save_checkpoint(out_dir + "/enhancer_final.ckpt", r.enhancer.named_parameters());
  if (r.sel) ag::save_checkpoint(out_dir + "/selection.ckpt", r.sel->named_parameters());
  std::cout << "wrote step-1/2/final checkpoints under " << out_dir << "\n";
}

int cmd_three_step(CommonOpts& common, const std::string& manifest, const std::string& out_dir,
                   bool with_selection) {
  auto cfg = load_config(common);
  auto corpus = corpus_from(cfg, manifest);
  auto steps = three_step_config(cfg, common);
  steps.with_selection = with_selection;
  const std::string rnnt_name = cfg.get_str("rnnt.preset", "desk");
  const std::string dcrn_name = cfg.get_str("dcrn.preset", "tiny");
  reject_unknown_keys(cfg, common);

  auto r = trainer::three_step_train(
      corpus, steps, rnnt_preset(rnnt_name, corpus.manifest.vocab.size_with_blank()),
      dcrn_preset(dcrn_name));
  report_and_save_models(r, out_dir.empty() ? "three-step-out" : out_dir);
  return kExitOk;
}

int cmd_combined(CommonOpts& common, const std::string& manifest, const std::string& out_dir,
                 const std::string& mode_name) {
  auto cfg = load_config(common);
  auto corpus = corpus_from(cfg, manifest);
  trainer::CombinedConfig cc;
  cc.steps = three_step_config(cfg, common);
  cc.stage_a_sched = schedule_from(cfg, "stage_a", 20);
  const std::string rnnt_name = cfg.get_str("rnnt.preset", "desk");
  const std::string dcrn_name = cfg.get_str("dcrn.preset", "tiny");
  reject_unknown_keys(cfg, common);

  trainer::CombinedMode mode;
  if (mode_name == "b") mode = trainer::CombinedMode::RowB;
  else if (mode_name == "c") mode = trainer::CombinedMode::RowC;
  else if (mode_name == "d") mode = trainer::CombinedMode::RowD;
  else if (mode_name == "e") mode = trainer::CombinedMode::RowE;
  else throw std::invalid_argument("--mode must be b|c|d|e");

  auto r = trainer::combined_train(
      corpus, mode, cc, rnnt_preset(rnnt_name, corpus.manifest.vocab.size_with_blank()),
      dcrn_preset(dcrn_name));
  const std::string dir = out_dir.empty() ? "combined-out" : out_dir;
  fs::create_directories(dir);
  ag::save_checkpoint(dir + "/asr_stage_a.ckpt", r.stage_a.named_parameters());
  report_and_save_models(r.rest, dir);
  return kExitOk;
}

int cmd_enhance(CommonOpts& common, const std::string& manifest, const std::string& ckpt,
                const std::string& preset, const std::string& out_dir, const std::string& split) {
  auto corpus = trainer::LoadedCorpus::load(manifest);
  auto model = load_enhancer(ckpt, preset, 1);
  fs::create_directories(out_dir);
  const auto idxs = split.empty()
                        ? [&] {
                            std::vector<int> all(corpus.manifest.entries.size());
                            for (size_t i = 0; i < all.size(); ++i) all[i] = int(i);
                            return all;
                          }()
                        : corpus.manifest.split_indices(corpus::parse_split(split));
  trainer::parallel_for(int(idxs.size()), common.threads, [&](int k) {
    const int i = idxs[size_t(k)];
    dsp::Waveform e = dcrn::enhance(model, corpus.audio[size_t(i)]);
    dsp::write_wav((fs::path(out_dir) / (corpus.utt(i).id + ".wav")).string(), e);
  });
  std::cout << "enhanced " << idxs.size() << " utterances into " << out_dir << "\n";
  return kExitOk;
}

int cmd_decode(CommonOpts& common, const std::string& manifest, const std::string& asr_ckpt,
               const std::string& rnnt_name, const std::string& enh_ckpt,
               const std::string& dcrn_name, const std::string& sel_ckpt, const std::string& split,
               const std::string& out, int max_symbols) {
  auto corpus = trainer::LoadedCorpus::load(manifest);
  auto asr = load_asr(asr_ckpt, rnnt_name, corpus.manifest.vocab.size_with_blank(), 1);
  std::optional<dcrn::EnhancementModel> enh;
  std::optional<selection::SelectionModel> sel;
  if (!enh_ckpt.empty()) enh = load_enhancer(enh_ckpt, dcrn_name, 1);
  if (!sel_ckpt.empty()) {
    if (!enh) throw std::invalid_argument("--selection requires --enhancer");
    sel = selection::build_selection(dsp::kNumMels, 1);
    ag::load_checkpoint_into(sel_ckpt, sel->named_parameters());
  }
  trainer::Frontend fe{enh ? &*enh : nullptr, sel ? &*sel : nullptr};

  const auto idxs = corpus.manifest.split_indices(corpus::parse_split(split));
  std::vector<std::string> lines(idxs.size());
  trainer::parallel_for(int(idxs.size()), common.threads, [&](int k) {
    const int i = idxs[size_t(k)];
    auto feats = trainer::frontend_features(fe, corpus.audio[size_t(i)]);
    auto hyp = rnnt::greedy_decode(asr, feats, max_symbols);
    lines[size_t(k)] = corpus.utt(i).id + "\t" + corpus.manifest.vocab.decode(hyp);
  });
  std::ofstream os(out);
  if (!os) throw DataError("decode: cannot open output " + out);
  for (const auto& l : lines) os << l << "\n";
  std::cout << "decoded " << idxs.size() << " utterances into " << out << "\n";
  return kExitOk;
}

int cmd_evaluate(CommonOpts& common, const std::string& manifest, const std::string& hyp_path,
                 const std::string& out_prefix, const std::string& enhanced_dir) {
  auto corpus = trainer::LoadedCorpus::load(manifest);
  std::map<std::string, std::string> hyp;
  {
    std::ifstream is(hyp_path);
    if (!is) throw DataError("evaluate: cannot open " + hyp_path);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      hyp[line.substr(0, tab)] = tab == std::string::npos ? "" : line.substr(tab + 1);
    }
  }
  struct Row {
    std::string id;
    corpus::Split split;
    metrics::WerBreakdown wer;
    double si_snr = std::nan("");
  };
  std::vector<Row> rows;
  for (size_t i = 0; i < corpus.manifest.entries.size(); ++i) {
    const auto& u = corpus.manifest.entries[i];
    auto it = hyp.find(u.id);
    if (it == hyp.end()) continue;
    Row r;
    r.id = u.id;
    r.split = u.split;
    std::vector<std::string> ref, hv;
    for (int id : u.transcript) ref.push_back(corpus.manifest.vocab.symbol_of(id));
    for (int id : corpus.manifest.vocab.encode(it->second)) {
      hv.push_back(corpus.manifest.vocab.symbol_of(id));
    }
    r.wer = metrics::wer(ref, hv);
    if (!enhanced_dir.empty()) {
      const fs::path ep = fs::path(enhanced_dir) / (u.id + ".wav");
      if (fs::exists(ep)) {
        r.si_snr = metrics::si_snr(dsp::read_wav(ep.string()),
                                   corpus::load_reference(corpus.manifest, u));
      }
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw DataError("evaluate: no hypothesis matched any manifest id");

  std::ofstream per(out_prefix + ".per_utt.csv");
  per << "id,split,wer,si_snr\n";
  for (const auto& r : rows) {
    per << r.id << "," << corpus::split_name(r.split) << "," << fmt_pct(r.wer.wer) << ",";
    if (!std::isnan(r.si_snr)) per << r.si_snr;
    per << "\n";
  }

  std::ofstream sum(out_prefix + ".summary.csv");
  sum << "split,wer,utts,edits,ref_words,si_snr_avg\n";
  for (auto split : {corpus::Split::Train, corpus::Split::Valid, corpus::Split::TestClean,
                     corpus::Split::TestNoisy}) {
    int edits = 0, words = 0, n = 0, snr_n = 0;
    double snr_sum = 0;
    for (const auto& r : rows) {
      if (r.split != split) continue;
      ++n;
      edits += r.wer.total_edits();
      words += r.wer.ref_words;
      if (!std::isnan(r.si_snr)) {
        ++snr_n;
        snr_sum += r.si_snr;
      }
    }
    if (n == 0) continue;
    sum << corpus::split_name(split) << "," << fmt_pct(double(edits) / words) << "," << n << ","
        << edits << "," << words << ",";
    if (snr_n > 0) sum << snr_sum / snr_n;
    sum << "\n";
    std::cout << corpus::split_name(split) << " WER " << fmt_pct(double(edits) / words) << "% ("
              << n << " utts)";
    if (snr_n > 0) std::cout << ", mean SI-SNR " << snr_sum / snr_n << " dB";
    std::cout << "\n";
  }
  (void)common;
  return kExitOk;
}

double summary_wer(const std::string& path, const std::string& split) {
  std::ifstream is(path);
  if (!is) throw DataError("werr: cannot open " + path);
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    const auto c1 = line.find(',');
    if (c1 == std::string::npos || line.substr(0, c1) != split) continue;
    const auto c2 = line.find(',', c1 + 1);
    return std::stod(line.substr(c1 + 1, c2 - c1 - 1));
  }
  throw DataError("werr: split '" + split + "' not found in " + path);
}

int cmd_werr(const std::string& base, const std::string& neu) {
  const double cb = summary_wer(base, "test-clean");
  const double nb = summary_wer(base, "test-noisy");
  const double cn = summary_wer(neu, "test-clean");
  const double nn = summary_wer(neu, "test-noisy");
  auto r = metrics::werr(cb, nb, cn, nn);
  std::printf("clean: %.2f%% -> %.2f%% (WERR %.1f%%)\n", r.clean_base, r.clean_new, r.werr_clean);
  std::printf("noisy: %.2f%% -> %.2f%% (WERR %.1f%%)\n", r.noisy_base, r.noisy_new, r.werr_noisy);
  std::printf("average WERR: %.1f%%\n", r.werr_avg);
  return kExitOk;
}

int cmd_shapes(const std::string& preset) {
  auto chain = dcrn::stage_chain(dcrn_preset(preset));
  for (size_t i = 0; i < chain.size(); ++i) {
    std::cout << "(" << chain[i].channels << ", " << chain[i].freq << ")";
    std::cout << (i + 1 == chain.size() ? "\n" : " ");
  }
  // verify the built model actually produces the chain
  auto m = dcrn::build_dcrn(dcrn_preset(preset), 1);
  ag::Graph g(false);
  std::vector<dcrn::StageTrace> trace;
  dcrn::dcrn_forward(g, m, ag::Tensor::zeros({2, 1, chain.front().freq}), &trace);
  size_t k = 0;
  for (const auto& st : trace) {
    if (st.name == "blstm") continue;
    if (st.channels != chain[k].channels || st.freq != chain[k].freq) {
      throw NumericError("shapes: live activations deviate from the configured chain");
    }
    ++k;
  }
  std::cout << "verified " << k << " live activation shapes\n";
  return kExitOk;
}

int cmd_grad_check() {
  Rng rng(1);
  double worst = 0.0;
  auto report = [&](const char* name, double err, double tol) {
    std::printf("%-24s max rel err %.3e (tol %.0e)\n", name, err, tol);
    worst = std::max(worst, err / tol);
  };

  {  // rnnt loss through log-softmax
    std::vector<double> logits(size_t(3) * 3 * 4);
    for (double& v : logits) v = rng.uniform(-1.5, 1.5);
    ag::Tensor lt = ag::Tensor::from({3, 3, 4}, logits);
    const double err = ag::grad_check(
        [&](ag::Graph& g, const ag::Tensor& x) {
          rnnt::PosteriorGrid grid;
          grid.frames = 3;
          grid.labels = 2;
          grid.vocab = 4;
          grid.logits = x;
          grid.log_probs = g.log_softmax(x);
          return rnnt::rnnt_loss(g, grid, {1, 3});
        },
        lt);
    report("rnnt_loss", err, 1e-5);
  }
  {  // dcrn toy preset, subsampled coordinates
    auto m = dcrn::build_dcrn(dcrn::DcrnConfig::toy(), 2);
    std::vector<double> x(size_t(2) * 3 * 33);
    for (double& v : x) v = rng.uniform(-0.5, 0.5);
    ag::Tensor xt = ag::Tensor::from({2, 3, 33}, x);
    const double err = ag::grad_check_params(
        [&](ag::Graph& g) { return g.sum(dcrn::dcrn_forward(g, m, xt)); }, m.named_parameters(),
        1e-5, 2, 3);
    report("dcrn_forward(toy)", err, 1e-4);
  }
  std::cout << (worst < 1.0 ? "gradient suite PASS\n" : "gradient suite FAIL\n");
  return worst < 1.0 ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"speech-enhancement-assisted RNN-T toolkit"};
  app.require_subcommand(1);
  CommonOpts common;

  // synth-data
  std::string out_dir, manifest, out_path, split;
  int utts = 2000, vocab = 8, min_len = 2, max_len = 6;
  uint64_t seed = 1;
  auto* synth = app.add_subcommand("synth-data", "generate the synthetic tone-syllable corpus");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--utts", utts, "total utterances across all splits")->capture_default_str();
  synth->add_option("--vocab", vocab, "number of symbols (<= 16)")->capture_default_str();
  synth->add_option("--seed", seed, "corpus seed")->capture_default_str();
  synth->add_option("--min-len", min_len, "shortest transcript")->capture_default_str();
  synth->add_option("--max-len", max_len, "longest transcript")->capture_default_str();

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", common.config_path, "run config file (INI)");
    cmd->add_option("--preset", common.preset, "named preset in the presets directory");
    cmd->add_option("--presets-dir", common.presets_dir, "presets directory")
        ->capture_default_str();
    cmd->add_option("--threads", common.threads, "worker thread cap")->capture_default_str();
  };

  // train-enhancer
  auto* tre = app.add_subcommand("train-enhancer", "train the DCRN on clean/noisy pairs");
  add_common(tre);
  tre->add_option("--manifest", manifest, "corpus manifest (overrides config)");
  tre->add_option("--out", out_path, "checkpoint output path");

  // train-asr
  bool aug_noise = false, aug_enh = false, with_selection = false;
  std::string kl = "off", enhancer_ckpt, init_from, asr_ckpt, sel_ckpt, mode = "b";
  std::string rnnt_name = "desk", dcrn_name = "tiny";
  auto* tra = app.add_subcommand("train-asr", "train the RNN-T with optional augmentation");
  add_common(tra);
  tra->add_option("--manifest", manifest, "corpus manifest (overrides config)");
  tra->add_option("--out", out_path, "checkpoint output path");
  tra->add_flag("--augment-noise", aug_noise, "additive noise with probability 0.5");
  tra->add_flag("--augment-enhance", aug_enh, "per-batch enhancement with probability 0.5");
  tra->add_option("--kl", kl, "consistency pairs: off|uniform|s3s4")->capture_default_str();
  tra->add_option("--enhancer-ckpt", enhancer_ckpt, "trained enhancer checkpoint");
  tra->add_option("--init-from", init_from, "initialize parameters from a checkpoint");

  // three-step
  auto* ts = app.add_subcommand("three-step", "the three-step enhancement-frontend scheme");
  add_common(ts);
  ts->add_option("--manifest", manifest, "corpus manifest (overrides config)");
  ts->add_option("--out", out_dir, "output directory for the step checkpoints");
  ts->add_flag("--selection", with_selection, "train the T-F selection module afterwards");

  // combined
  auto* cb = app.add_subcommand("combined", "data augmentation plus preprocessing");
  add_common(cb);
  cb->add_option("--manifest", manifest, "corpus manifest (overrides config)");
  cb->add_option("--out", out_dir, "output directory");
  cb->add_option("--mode", mode, "variant: b|c|d|e")->capture_default_str();

  // enhance
  auto* enh = app.add_subcommand("enhance", "write enhanced WAVs for a manifest");
  add_common(enh);
  enh->add_option("--manifest", manifest, "corpus manifest")->required();
  enh->add_option("--enhancer-ckpt", enhancer_ckpt, "enhancer checkpoint")->required();
  enh->add_option("--dcrn-preset", dcrn_name, "enhancer preset")->capture_default_str();
  enh->add_option("--out", out_dir, "output directory")->required();
  enh->add_option("--split", split, "restrict to one split");

  // decode
  std::string decode_out = "transcripts.tsv";
  int max_symbols = 4;
  auto* dec = app.add_subcommand("decode", "greedy-decode a split into transcripts");
  add_common(dec);
  dec->add_option("--manifest", manifest, "corpus manifest")->required();
  dec->add_option("--asr-ckpt", asr_ckpt, "RNN-T checkpoint")->required();
  dec->add_option("--rnnt-preset", rnnt_name, "RNN-T preset")->capture_default_str();
  dec->add_option("--enhancer-ckpt", enhancer_ckpt, "optional enhancement frontend");
  dec->add_option("--dcrn-preset", dcrn_name, "enhancer preset")->capture_default_str();
  dec->add_option("--selection-ckpt", sel_ckpt, "optional selection module");
  dec->add_option("--split", split, "split to decode")->required();
  dec->add_option("--out", decode_out, "transcript output path")->capture_default_str();
  dec->add_option("--max-symbols-per-frame", max_symbols, "greedy emission cap")
      ->capture_default_str();

  // evaluate
  std::string hyp_path, out_prefix = "eval", enhanced_dir;
  auto* ev = app.add_subcommand("evaluate", "score transcripts (WER, optional SI-SNR)");
  add_common(ev);
  ev->add_option("--manifest", manifest, "corpus manifest")->required();
  ev->add_option("--hyp", hyp_path, "decoded transcripts (id<TAB>text)")->required();
  ev->add_option("--out-prefix", out_prefix, "CSV output prefix")->capture_default_str();
  ev->add_option("--enhanced-dir", enhanced_dir, "enhanced WAVs for SI-SNR");

  // werr
  std::string base_summary, new_summary;
  auto* wr = app.add_subcommand("werr", "relative WER reduction from two evaluate summaries");
  wr->add_option("--base", base_summary, "baseline summary.csv")->required();
  wr->add_option("--new", new_summary, "improved summary.csv")->required();

  // grad-check
  app.add_subcommand("grad-check", "run the gradient self-check suite");

  // shapes
  std::string shapes_preset = "paper";
  auto* sh = app.add_subcommand("shapes", "print and verify a DCRN stage chain");
  sh->add_option("--preset", shapes_preset, "paper|toy|tiny")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth_data(out_dir, utts, vocab, seed, min_len, max_len);
    if (tre->parsed()) return cmd_train_enhancer(common, manifest, out_path);
    if (tra->parsed()) {
      return cmd_train_asr(common, manifest, out_path, aug_noise, aug_enh, kl, enhancer_ckpt,
                           init_from);
    }
    if (ts->parsed()) return cmd_three_step(common, manifest, out_dir, with_selection);
    if (cb->parsed()) return cmd_combined(common, manifest, out_dir, mode);
    if (enh->parsed()) return cmd_enhance(common, manifest, enhancer_ckpt, dcrn_name, out_dir, split);
    if (dec->parsed()) {
      return cmd_decode(common, manifest, asr_ckpt, rnnt_name, enhancer_ckpt, dcrn_name, sel_ckpt,
                        split, decode_out, max_symbols);
    }
    if (ev->parsed()) return cmd_evaluate(common, manifest, hyp_path, out_prefix, enhanced_dir);
    if (wr->parsed()) return cmd_werr(base_summary, new_summary);
    if (app.got_subcommand("grad-check")) return cmd_grad_check();
    if (sh->parsed()) return cmd_shapes(shapes_preset);
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

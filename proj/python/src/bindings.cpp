// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Python bindings for the main operations: time-frequency analysis, the
// transducer lattice loss, the KL consistency term, enhancement, metrics and
// corpus synthesis.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "enhasr/consistency.hpp"
#include "enhasr/corpus.hpp"
#include "enhasr/dcrn.hpp"
#include "enhasr/errors.hpp"
#include "enhasr/metrics.hpp"
#include "enhasr/rnnt.hpp"
#include "enhasr/trainer.hpp"

namespace py = pybind11;
using namespace enhasr;

namespace {

using Arr = py::array_t<double, py::array::c_style | py::array::forcecast>;

dsp::Waveform to_wave(const Arr& a) {
  if (a.ndim() != 1) throw std::invalid_argument("waveform must be 1-D");
  dsp::Waveform w;
  w.samples.assign(a.data(), a.data() + a.size());
  return w;
}

Arr from_wave(const dsp::Waveform& w) {
  Arr out(py::ssize_t(w.samples.size()));
  std::copy(w.samples.begin(), w.samples.end(), out.mutable_data());
  return out;
}

dsp::StftConfig cfg_from(double frame_ms, double shift_ms, int fft_size) {
  return dsp::StftConfig{frame_ms, shift_ms, fft_size, dsp::WindowKind::SqrtHann};
}

py::tuple stft_py(const Arr& wave, double frame_ms, double shift_ms, int fft_size) {
  auto spec = dsp::stft(to_wave(wave), cfg_from(frame_ms, shift_ms, fft_size));
  Arr re({spec.frames, spec.bins}), im({spec.frames, spec.bins});
  std::copy(spec.re.begin(), spec.re.end(), re.mutable_data());
  std::copy(spec.im.begin(), spec.im.end(), im.mutable_data());
  return py::make_tuple(re, im);
}

Arr istft_py(const Arr& re, const Arr& im, double frame_ms, double shift_ms, int fft_size,
             int out_len) {
  if (re.ndim() != 2 || im.ndim() != 2) throw std::invalid_argument("spectrogram must be 2-D");
  dsp::ComplexSpectrogram spec;
  spec.frames = int(re.shape(0));
  spec.bins = int(re.shape(1));
  spec.re.assign(re.data(), re.data() + re.size());
  spec.im.assign(im.data(), im.data() + im.size());
  return from_wave(dsp::istft(spec, cfg_from(frame_ms, shift_ms, fft_size), out_len));
}

Arr logmel_py(const Arr& wave) {
  auto f = dsp::logmel(to_wave(wave));
  Arr out({f.frames, f.dims});
  std::copy(f.values.begin(), f.values.end(), out.mutable_data());
  return out;
}

Arr normalize_py(const Arr& feats) {
  dsp::FeatureMatrix f;
  f.frames = int(feats.shape(0));
  f.dims = int(feats.shape(1));
  f.values.assign(feats.data(), feats.data() + feats.size());
  auto n = dsp::normalize_utterance(f);
  Arr out({n.frames, n.dims});
  std::copy(n.values.begin(), n.values.end(), out.mutable_data());
  return out;
}

py::tuple mix_at_snr_py(const Arr& s, const Arr& n, double snr_db) {
  auto r = dsp::mix_at_snr(to_wave(s), to_wave(n), snr_db);
  return py::make_tuple(from_wave(r.mixed), r.noise_scale, r.rescale);
}

py::tuple rnnt_loss_py(const Arr& log_probs, const std::vector<int>& labels, int blank,
                       bool with_grad) {
  if (log_probs.ndim() != 3) throw std::invalid_argument("log_probs must be [T,U+1,V]");
  const int t = int(log_probs.shape(0));
  const int u1 = int(log_probs.shape(1));
  const int v = int(log_probs.shape(2));
  std::vector<double> lp(log_probs.data(), log_probs.data() + log_probs.size());
  std::vector<double> grad;
  const double loss = rnnt::rnnt_loss_grid(lp, t, u1, v, labels, blank, with_grad ? &grad : nullptr);
  if (!with_grad) return py::make_tuple(loss, py::none());
  Arr g({t, u1, v});
  std::copy(grad.begin(), grad.end(), g.mutable_data());
  return py::make_tuple(loss, g);
}

double kl_consistency_py(const Arr& lp_a, const Arr& lp_b) {
  if (lp_a.ndim() != 3 || lp_b.ndim() != 3) throw std::invalid_argument("grids must be [T,U+1,V]");
  ag::Graph g(false);
  auto make = [&](const Arr& a) {
    rnnt::PosteriorGrid grid;
    grid.frames = int(a.shape(0));
    grid.labels = int(a.shape(1)) - 1;
    grid.vocab = int(a.shape(2));
    grid.log_probs = ag::Tensor::from({grid.frames, grid.labels + 1, grid.vocab},
                                      std::vector<double>(a.data(), a.data() + a.size()));
    grid.logits = grid.log_probs;
    return grid;
  };
  return consistency::g_kl_consistency(g, make(lp_a), make(lp_b)).item();
}

py::dict wer_py(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
  auto b = metrics::wer(ref, hyp);
  py::dict d;
  d["substitutions"] = b.substitutions;
  d["deletions"] = b.deletions;
  d["insertions"] = b.insertions;
  d["ref_words"] = b.ref_words;
  d["wer"] = b.wer;
  return d;
}

py::dict werr_py(double clean_base, double noisy_base, double clean_new, double noisy_new) {
  auto r = metrics::werr(clean_base, noisy_base, clean_new, noisy_new);
  py::dict d;
  d["werr_clean"] = r.werr_clean;
  d["werr_noisy"] = r.werr_noisy;
  d["werr_avg"] = r.werr_avg;
  return d;
}

dcrn::DcrnConfig preset_by_name(const std::string& name) {
  if (name == "paper") return dcrn::DcrnConfig::paper();
  if (name == "toy") return dcrn::DcrnConfig::toy();
  if (name == "tiny") return dcrn::DcrnConfig::tiny();
  throw std::invalid_argument("unknown dcrn preset '" + name + "'");
}

std::vector<std::pair<int, int>> stage_chain_py(const std::string& preset) {
  std::vector<std::pair<int, int>> out;
  for (const auto& s : dcrn::stage_chain(preset_by_name(preset))) {
    out.emplace_back(s.channels, s.freq);
  }
  return out;
}

Arr enhance_py(const Arr& wave, const std::string& preset, const std::string& ckpt,
               uint64_t seed) {
  auto m = dcrn::build_dcrn(preset_by_name(preset), seed);
  if (!ckpt.empty()) ag::load_checkpoint_into(ckpt, m.named_parameters());
  return from_wave(dcrn::enhance(m, to_wave(wave)));
}

Arr synth_noise_py(const std::string& kind, double seconds, uint64_t seed) {
  return from_wave(corpus::synth_noise(corpus::parse_noise_kind(kind), seconds, seed));
}

std::string synth_corpus_py(const std::string& out_dir, int utts, int vocab, uint64_t seed,
                            int min_len, int max_len) {
  corpus::SynthSpec spec;
  spec.n_utts = utts;
  spec.vocab_size = vocab;
  spec.seed = seed;
  spec.min_len = min_len;
  spec.max_len = max_len;
  corpus::synth_corpus(spec, out_dir);
  return out_dir + "/manifest.tsv";
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "speech-enhancement-assisted RNN-T: DSP, lattice loss, metrics";

  m.def("stft", &stft_py, py::arg("wave"), py::arg("frame_ms") = 32.0, py::arg("shift_ms") = 10.0,
        py::arg("fft_size") = 512, "STFT with a sqrt-Hann window; returns (real, imag) [T,F]");
  m.def("istft", &istft_py, py::arg("re"), py::arg("im"), py::arg("frame_ms") = 32.0,
        py::arg("shift_ms") = 10.0, py::arg("fft_size") = 512, py::arg("out_len") = -1,
        "normalized overlap-add inverse STFT");
  m.def("logmel", &logmel_py, py::arg("wave"), "80-dim log-mel features (16 ms / 10 ms)");
  m.def("normalize_utterance", &normalize_py, py::arg("feats"),
        "per-coefficient zero-mean unit-variance normalization");
  m.def("mix_at_snr", &mix_at_snr_py, py::arg("speech"), py::arg("noise"), py::arg("snr_db"),
        "returns (mixed, noise_scale, rescale)");
  m.def("rnnt_loss", &rnnt_loss_py, py::arg("log_probs"), py::arg("labels"), py::arg("blank") = 0,
        py::arg("with_grad") = false,
        "exact transducer loss over a [T,U+1,V] log-prob grid; optional analytic gradient");
  m.def("kl_consistency", &kl_consistency_py, py::arg("log_probs_a"), py::arg("log_probs_b"),
        "time- and label-averaged symmetric KL between two posterior grids");
  m.def("si_snr", [](const Arr& est, const Arr& ref) { return metrics::si_snr(to_wave(est), to_wave(ref)); },
        py::arg("est"), py::arg("ref"), "scale-invariant SNR in dB, capped at +60");
  m.def("wer", &wer_py, py::arg("ref"), py::arg("hyp"));
  m.def("werr", &werr_py, py::arg("clean_base"), py::arg("noisy_base"), py::arg("clean_new"),
        py::arg("noisy_new"), "relative WER reduction, unweighted clean/noisy average");
  m.def("lr_at",
        [](int epoch, int warmup, double peak, double min_lr, int total) {
          return trainer::lr_at({warmup, peak, min_lr, total}, epoch);
        },
        py::arg("epoch"), py::arg("warmup") = 2, py::arg("peak") = 4e-4, py::arg("min_lr") = 4e-6,
        py::arg("total") = 20, "tri-stage learning-rate schedule");
  m.def("dcrn_stage_chain", &stage_chain_py, py::arg("preset"),
        "(channels, freq) chain for a named preset");
  m.def("enhance", &enhance_py, py::arg("wave"), py::arg("preset") = "tiny",
        py::arg("ckpt") = std::string(), py::arg("seed") = 1,
        "run a DCRN over a waveform (random weights unless a checkpoint is given)");
  m.def("synth_noise", &synth_noise_py, py::arg("kind"), py::arg("seconds"), py::arg("seed"),
        "unit-RMS noise: white | babble-like | tonal");
  m.def("synth_corpus", &synth_corpus_py, py::arg("out_dir"), py::arg("utts") = 100,
        py::arg("vocab") = 8, py::arg("seed") = 1, py::arg("min_len") = 2, py::arg("max_len") = 6,
        "generate the tone-syllable corpus; returns the manifest path");

  py::register_exception<DataError>(m, "DataError");
  py::register_exception<NumericError>(m, "NumericError");
}

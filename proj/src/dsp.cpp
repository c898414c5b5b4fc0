// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "enhasr/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>

#include "enhasr/errors.hpp"
#include "fft.hpp"

namespace enhasr::dsp {

std::vector<double> make_window(const StftConfig& cfg) {
  const int n = cfg.frame_samples();
  std::vector<double> w(size_t(n), 1.0);
  if (cfg.window == WindowKind::SqrtHann) {
    for (int i = 0; i < n; ++i) {
      w[size_t(i)] = std::sqrt(0.5 * (1.0 - std::cos(2.0 * M_PI * double(i) / double(n))));
    }
  }
  return w;
}

static int frame_count(int len, int frame, int shift) { return 1 + (len - frame) / shift; }

ComplexSpectrogram stft(const Waveform& w, const StftConfig& cfg) {
  const int frame = cfg.frame_samples(w.sample_rate);
  const int shift = cfg.shift_samples(w.sample_rate);
  const int nfft = cfg.fft_size;
  if (frame > nfft) throw std::invalid_argument("stft: frame longer than fft_size");
  if (w.length() < frame) {
    throw std::invalid_argument("stft: waveform of " + std::to_string(w.length()) +
                                " samples is shorter than one frame (" + std::to_string(frame) + ")");
  }
  const std::vector<double> win = make_window(cfg);
  ComplexSpectrogram out;
  out.frames = frame_count(w.length(), frame, shift);
  out.bins = cfg.bins();
  out.re.assign(size_t(out.frames) * out.bins, 0.0);
  out.im.assign(size_t(out.frames) * out.bins, 0.0);
  std::vector<double> buf(size_t(nfft), 0.0);
  for (int t = 0; t < out.frames; ++t) {
    const double* src = w.samples.data() + size_t(t) * shift;
    for (int i = 0; i < frame; ++i) buf[size_t(i)] = src[i] * win[size_t(i)];
    std::fill(buf.begin() + frame, buf.end(), 0.0);
    fft::rfft(buf.data(), nfft, out.re.data() + size_t(t) * out.bins,
              out.im.data() + size_t(t) * out.bins);
  }
  return out;
}

Waveform istft(const ComplexSpectrogram& spec, const StftConfig& cfg, int out_len) {
  const int frame = cfg.frame_samples();
  const int shift = cfg.shift_samples();
  const int nfft = cfg.fft_size;
  if (spec.bins != cfg.bins()) {
    throw std::invalid_argument("istft: spectrogram has " + std::to_string(spec.bins) +
                                " bins but config expects " + std::to_string(cfg.bins()));
  }
  const std::vector<double> win = make_window(cfg);
  const int natural = (spec.frames - 1) * shift + frame;
  std::vector<double> acc(size_t(natural), 0.0);
  std::vector<double> norm(size_t(natural), 0.0);
  std::vector<double> time(size_t(nfft), 0.0);
  for (int t = 0; t < spec.frames; ++t) {
    fft::irfft(spec.re.data() + size_t(t) * spec.bins, spec.im.data() + size_t(t) * spec.bins,
               nfft, time.data());
    const int base = t * shift;
    for (int i = 0; i < frame; ++i) {
      acc[size_t(base + i)] += time[size_t(i)] * win[size_t(i)];
      norm[size_t(base + i)] += win[size_t(i)] * win[size_t(i)];
    }
  }
  for (int i = 0; i < natural; ++i) {
    acc[size_t(i)] = norm[size_t(i)] > 1e-8 ? acc[size_t(i)] / norm[size_t(i)] : 0.0;
  }
  if (out_len >= 0) acc.resize(size_t(out_len), 0.0);
  Waveform w;
  w.samples = std::move(acc);
  return w;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

const std::vector<double>& mel_bank(int fft_size, int n_mels, int sr) {
  static std::mutex mu;
  static std::map<std::tuple<int, int, int>, std::vector<double>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_tuple(fft_size, n_mels, sr);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;

  const int bins = fft_size / 2 + 1;
  std::vector<double> edges(size_t(n_mels) + 2);
  const double mel_max = hz_to_mel(sr / 2.0);
  for (int i = 0; i < n_mels + 2; ++i) edges[size_t(i)] = mel_to_hz(mel_max * i / double(n_mels + 1));
  std::vector<double> bank(size_t(bins) * n_mels, 0.0);
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[size_t(m)], mid = edges[size_t(m) + 1], hi = edges[size_t(m) + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = double(k) * sr / fft_size;
      double w = 0.0;
      if (f >= lo && f <= mid && mid > lo) w = (f - lo) / (mid - lo);
      else if (f > mid && f <= hi && hi > mid) w = (hi - f) / (hi - mid);
      bank[size_t(k) * n_mels + m] = w;
    }
  }
  return cache.emplace(key, std::move(bank)).first->second;
}

// ---------------------------------------------------------------------------
// tensor bridges

ag::Tensor to_tensor(const Waveform& w) {
  return ag::Tensor::from({w.length()}, w.samples);
}

ag::Tensor to_tensor(const ComplexSpectrogram& s) {
  std::vector<double> d;
  d.reserve(s.re.size() * 2);
  d.insert(d.end(), s.re.begin(), s.re.end());
  d.insert(d.end(), s.im.begin(), s.im.end());
  return ag::Tensor::from({2, s.frames, s.bins}, std::move(d));
}

ag::Tensor to_tensor(const FeatureMatrix& f) {
  return ag::Tensor::from({f.frames, f.dims}, f.values);
}

Waveform tensor_to_wave(const ag::Tensor& t) {
  Waveform w;
  w.samples = t.data();
  return w;
}

ComplexSpectrogram tensor_to_spec(const ag::Tensor& t) {
  if (t.ndim() != 3 || t.dim(0) != 2) {
    throw std::invalid_argument("tensor_to_spec: expects [2,T,F], got " + ag::shape_str(t.shape()));
  }
  ComplexSpectrogram s;
  s.frames = t.dim(1);
  s.bins = t.dim(2);
  const size_t plane = size_t(s.frames) * s.bins;
  s.re.assign(t.data().begin(), t.data().begin() + plane);
  s.im.assign(t.data().begin() + plane, t.data().end());
  return s;
}

FeatureMatrix tensor_to_features(const ag::Tensor& t) {
  if (t.ndim() != 2) throw std::invalid_argument("tensor_to_features: expects [T,D]");
  FeatureMatrix f;
  f.frames = t.dim(0);
  f.dims = t.dim(1);
  f.values = t.data();
  return f;
}

// ---------------------------------------------------------------------------
// differentiable stft / istft

ag::Tensor g_stft(ag::Graph& g, const ag::Tensor& wave, const StftConfig& cfg) {
  if (wave.ndim() != 1) throw std::invalid_argument("stft: waveform tensor must be 1-D");
  Waveform w;
  w.samples = wave.data();
  ComplexSpectrogram spec = stft(w, cfg);
  const int frames = spec.frames, bins = spec.bins;
  ag::Tensor out = to_tensor(spec);
  if (g.recording() && g.tracked(wave)) {
    const int frame = cfg.frame_samples();
    const int shift = cfg.shift_samples();
    const int nfft = cfg.fft_size;
    g.add_node({wave}, {out}, [&g, wave, out, frames, bins, frame, shift, nfft, cfg]() {
      const double* grad = g.out_grad(out);
      if (!grad) return;
      const std::vector<double> win = make_window(cfg);
      auto& gw = g.grad_buf(wave);
      const size_t plane = size_t(frames) * bins;
      std::vector<double> gtime(size_t(nfft), 0.0);
      for (int t = 0; t < frames; ++t) {
        fft::rfft_adjoint(grad + size_t(t) * bins, grad + plane + size_t(t) * bins, nfft,
                          gtime.data());
        const int base = t * shift;
        for (int i = 0; i < frame; ++i) gw[size_t(base + i)] += gtime[size_t(i)] * win[size_t(i)];
      }
    });
  }
  return out;
}

ag::Tensor g_istft(ag::Graph& g, const ag::Tensor& spec, const StftConfig& cfg, int out_len) {
  ComplexSpectrogram s = tensor_to_spec(spec);
  Waveform w = istft(s, cfg, out_len);
  const int frames = s.frames, bins = s.bins;
  ag::Tensor out = to_tensor(w);
  if (g.recording() && g.tracked(spec)) {
    const int frame = cfg.frame_samples();
    const int shift = cfg.shift_samples();
    const int nfft = cfg.fft_size;
    g.add_node({spec}, {out}, [&g, spec, out, frames, bins, frame, shift, nfft, cfg]() {
      const double* grad = g.out_grad(out);
      if (!grad) return;
      const std::vector<double> win = make_window(cfg);
      const int natural = (frames - 1) * shift + frame;
      // redo the normalization buffer; division by it is a constant linear map
      std::vector<double> norm(size_t(natural), 0.0);
      for (int t = 0; t < frames; ++t) {
        for (int i = 0; i < frame; ++i) {
          norm[size_t(t * shift + i)] += win[size_t(i)] * win[size_t(i)];
        }
      }
      const int out_n = out.dim(0);
      std::vector<double> gacc(size_t(natural), 0.0);
      for (int i = 0; i < natural && i < out_n; ++i) {
        gacc[size_t(i)] = norm[size_t(i)] > 1e-8 ? grad[i] / norm[size_t(i)] : 0.0;
      }
      auto& gs = g.grad_buf(spec);
      const size_t plane = size_t(frames) * bins;
      std::vector<double> gframe(size_t(nfft), 0.0);
      for (int t = 0; t < frames; ++t) {
        const int base = t * shift;
        for (int i = 0; i < frame; ++i) gframe[size_t(i)] = gacc[size_t(base + i)] * win[size_t(i)];
        std::fill(gframe.begin() + frame, gframe.end(), 0.0);
        std::vector<double> gre(size_t(bins), 0.0), gim(size_t(bins), 0.0);
        fft::irfft_adjoint(gframe.data(), nfft, gre.data(), gim.data());
        for (int k = 0; k < bins; ++k) {
          gs[size_t(t) * bins + k] += gre[size_t(k)];
          gs[plane + size_t(t) * bins + k] += gim[size_t(k)];
        }
      }
    });
  }
  return out;
}

ag::Tensor g_logmel(ag::Graph& g, const ag::Tensor& wave) {
  const StftConfig cfg = StftConfig::asr();
  ag::Tensor spec = g_stft(g, wave, cfg);
  const int frames = spec.dim(1), bins = spec.dim(2);
  ag::Tensor re = g.reshape(g.slice(spec, 0, 0, 1), {frames, bins});
  ag::Tensor im = g.reshape(g.slice(spec, 0, 1, 2), {frames, bins});
  ag::Tensor power = g.add(g.square(re), g.square(im));
  static const ag::Tensor bank =
      ag::Tensor::from({cfg.bins(), kNumMels}, mel_bank(cfg.fft_size, kNumMels));
  return g.log(g.add_scalar(g.matmul(power, bank), kMelPowerFloor));
}

ag::Tensor g_normalize(ag::Graph& g, const ag::Tensor& feats) {
  if (feats.ndim() != 2 || feats.dim(0) < 2) {
    throw std::invalid_argument("normalize_utterance: needs [T>=2, D], got " +
                                ag::shape_str(feats.shape()));
  }
  ag::Tensor mean = g.col_mean(feats);
  ag::Tensor centered = g.sub_cols(feats, mean);
  ag::Tensor var = g.col_mean(g.square(centered));
  ag::Tensor stddev = g.sqrt(g.clamp_min(var, 1e-8));
  return g.div_cols(centered, stddev);
}

FeatureMatrix logmel(const Waveform& w) {
  if (w.sample_rate != kSampleRate) {
    throw std::invalid_argument("logmel: expects 16 kHz input, got " + std::to_string(w.sample_rate));
  }
  ag::Graph g(false);
  return tensor_to_features(g_logmel(g, to_tensor(w)));
}

FeatureMatrix normalize_utterance(const FeatureMatrix& f) {
  ag::Graph g(false);
  return tensor_to_features(g_normalize(g, to_tensor(f)));
}

// ---------------------------------------------------------------------------
// SNR mixing

MixResult mix_at_snr(const Waveform& s, const Waveform& n, double snr_db) {
  const int len = s.length();
  if (len == 0) throw std::invalid_argument("mix_at_snr: empty speech signal");
  // crop or loop the noise to the speech length
  std::vector<double> noise(size_t(len), 0.0);
  if (n.length() == 0) throw std::invalid_argument("mix_at_snr: empty noise signal");
  for (int i = 0; i < len; ++i) noise[size_t(i)] = n.samples[size_t(i % n.length())];

  // power over the nonzero-energy span of s, so padding silence does not bias SNR
  int lo = 0, hi = len - 1;
  while (lo < len && std::fabs(s.samples[size_t(lo)]) <= 1e-6) ++lo;
  while (hi >= 0 && std::fabs(s.samples[size_t(hi)]) <= 1e-6) --hi;
  if (lo > hi) throw std::invalid_argument("mix_at_snr: silent speech signal (zero power)");
  double ps = 0.0, pn = 0.0;
  for (int i = lo; i <= hi; ++i) {
    ps += s.samples[size_t(i)] * s.samples[size_t(i)];
    pn += noise[size_t(i)] * noise[size_t(i)];
  }
  const int span = hi - lo + 1;
  ps /= span;
  pn /= span;
  if (pn <= 0.0) throw std::invalid_argument("mix_at_snr: silent noise signal (zero power)");

  MixResult r;
  r.noise_scale = std::sqrt(ps / (pn * std::pow(10.0, snr_db / 10.0)));
  r.mixed.samples.resize(size_t(len));
  double peak = 0.0;
  for (int i = 0; i < len; ++i) {
    const double v = s.samples[size_t(i)] + r.noise_scale * noise[size_t(i)];
    r.mixed.samples[size_t(i)] = v;
    peak = std::max(peak, std::fabs(v));
  }
  if (peak > 1.0) {
    r.rescale = 1.0 / peak;
    for (double& v : r.mixed.samples) v *= r.rescale;
  }
  return r;
}

// ---------------------------------------------------------------------------
// WAV I/O (RIFF PCM, 16-bit little-endian, mono, 16 kHz)

namespace {

void put_u32(std::vector<unsigned char>& b, uint32_t v) {
  b.push_back(v & 0xff);
  b.push_back((v >> 8) & 0xff);
  b.push_back((v >> 16) & 0xff);
  b.push_back((v >> 24) & 0xff);
}

void put_u16(std::vector<unsigned char>& b, uint16_t v) {
  b.push_back(v & 0xff);
  b.push_back((v >> 8) & 0xff);
}

uint32_t get_u32(const unsigned char* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}

uint16_t get_u16(const unsigned char* p) { return uint16_t(p[0]) | uint16_t(p[1]) << 8; }

}  // namespace

void write_wav(const std::string& path, const Waveform& w) {
  const uint32_t n = uint32_t(w.samples.size());
  std::vector<unsigned char> b;
  b.reserve(44 + 2 * n);
  b.insert(b.end(), {'R', 'I', 'F', 'F'});
  put_u32(b, 36 + 2 * n);
  b.insert(b.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(b, 16);
  put_u16(b, 1);  // PCM
  put_u16(b, 1);  // mono
  put_u32(b, uint32_t(w.sample_rate));
  put_u32(b, uint32_t(w.sample_rate) * 2);
  put_u16(b, 2);
  put_u16(b, 16);
  b.insert(b.end(), {'d', 'a', 't', 'a'});
  put_u32(b, 2 * n);
  for (double v : w.samples) {
    const long q = std::clamp(std::lround(v * 32768.0), -32768L, 32767L);
    put_u16(b, uint16_t(int16_t(q)));
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("write_wav: cannot open " + path);
  os.write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
  if (!os) throw DataError("write_wav: write failed: " + path);
}

Waveform read_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("read_wav: cannot open " + path);
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (b.size() < 44 || std::memcmp(b.data(), "RIFF", 4) != 0 || std::memcmp(b.data() + 8, "WAVE", 4) != 0) {
    throw DataError("read_wav: not a RIFF/WAVE file: " + path);
  }
  size_t pos = 12;
  int channels = 0, bits = 0, rate = 0;
  const unsigned char* data = nullptr;
  uint32_t data_len = 0;
  while (pos + 8 <= b.size()) {
    const uint32_t sz = get_u32(b.data() + pos + 4);
    if (std::memcmp(b.data() + pos, "fmt ", 4) == 0 && pos + 8 + 16 <= b.size()) {
      const unsigned char* f = b.data() + pos + 8;
      if (get_u16(f) != 1) throw DataError("read_wav: not PCM: " + path);
      channels = get_u16(f + 2);
      rate = int(get_u32(f + 4));
      bits = get_u16(f + 14);
    } else if (std::memcmp(b.data() + pos, "data", 4) == 0) {
      data = b.data() + pos + 8;
      data_len = sz;
    }
    pos += 8 + sz + (sz & 1);
  }
  if (!data) throw DataError("read_wav: no data chunk: " + path);
  if (channels != 1 || bits != 16) {
    throw DataError("read_wav: expects 16-bit mono PCM: " + path);
  }
  Waveform w;
  w.sample_rate = rate;
  const uint32_t n = data_len / 2;
  w.samples.resize(size_t(n));
  for (uint32_t i = 0; i < n; ++i) {
    const auto q = int16_t(get_u16(data + size_t(i) * 2));
    w.samples[size_t(i)] = double(q) / 32768.0;
  }
  return w;
}

}  // namespace enhasr::dsp

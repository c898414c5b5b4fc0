// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "enhasr/dsp.hpp"

#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "enhasr/errors.hpp"
#include "test_util.hpp"

using namespace enhasr;
using dsp::StftConfig;
using dsp::Waveform;

TEST_SUITE_BEGIN("dsp");

namespace {

Waveform random_wave(int n, uint64_t seed, double amp = 0.5) {
  Rng rng(seed);
  Waveform w;
  w.samples.resize(size_t(n));
  for (double& v : w.samples) v = rng.uniform(-amp, amp);
  return w;
}

Waveform cosine_wave(double freq, int n, double amp = 0.5) {
  Waveform w;
  w.samples.resize(size_t(n));
  for (int i = 0; i < n; ++i) {
    w.samples[size_t(i)] = amp * std::cos(2.0 * M_PI * freq * i / dsp::kSampleRate);
  }
  return w;
}

// O(N^2) reference DFT of one windowed frame
void naive_dft(const std::vector<double>& x, int nfft, std::vector<double>& re,
               std::vector<double>& im) {
  const int bins = nfft / 2 + 1;
  re.assign(size_t(bins), 0.0);
  im.assign(size_t(bins), 0.0);
  for (int k = 0; k < bins; ++k) {
    for (int n = 0; n < int(x.size()); ++n) {
      const double a = -2.0 * M_PI * k * n / nfft;
      re[size_t(k)] += x[size_t(n)] * std::cos(a);
      im[size_t(k)] += x[size_t(n)] * std::sin(a);
    }
  }
}

double rel_l2(const std::vector<double>& a, const std::vector<double>& b, int lo, int hi) {
  double num = 0, den = 0;
  for (int i = lo; i < hi; ++i) {
    const double d = a[size_t(i)] - b[size_t(i)];
    num += d * d;
    den += b[size_t(i)] * b[size_t(i)];
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

}  // namespace

TEST_CASE("stft of a zero waveform is the zero spectrogram") {
  Waveform w;
  w.samples.assign(16000, 0.0);
  auto spec = dsp::stft(w, StftConfig::enhancement());
  CHECK(spec.bins == 257);
  for (double v : spec.re) CHECK(v == 0.0);
  for (double v : spec.im) CHECK(v == 0.0);
}

TEST_CASE("stft rejects waveforms shorter than one frame") {
  Waveform w;
  w.samples.assign(100, 0.1);
  CHECK_THROWS_AS(dsp::stft(w, StftConfig::enhancement()), std::invalid_argument);
}

TEST_CASE("rectangular-window stft of a bin-centered cosine concentrates at that bin") {
  StftConfig cfg{32.0, 10.0, 512, dsp::WindowKind::Rect};
  const int k = 20;  // bin center frequency k * 16000/512
  const double freq = double(k) * dsp::kSampleRate / cfg.fft_size;
  Waveform w = cosine_wave(freq, 512);
  auto spec = dsp::stft(w, cfg);
  REQUIRE(spec.frames == 1);

  // oracle: naive DFT of the same frame
  std::vector<double> re, im;
  naive_dft(w.samples, 512, re, im);
  for (int b = 0; b < spec.bins; ++b) {
    CHECK(spec.re[size_t(b)] == doctest::Approx(re[size_t(b)]).epsilon(1e-9).scale(1.0));
    CHECK(spec.im[size_t(b)] == doctest::Approx(im[size_t(b)]).epsilon(1e-9).scale(1.0));
  }
  // energy concentrated at bin k
  int argmax = 0;
  double best = -1;
  for (int b = 0; b < spec.bins; ++b) {
    const double mag = spec.re[size_t(b)] * spec.re[size_t(b)] + spec.im[size_t(b)] * spec.im[size_t(b)];
    if (mag > best) {
      best = mag;
      argmax = b;
    }
  }
  CHECK(argmax == k);
}

TEST_CASE("stft is linear") {
  Waveform a = random_wave(8000, 1), b = random_wave(8000, 2);
  Waveform sum;
  sum.samples.resize(a.samples.size());
  for (size_t i = 0; i < a.samples.size(); ++i) sum.samples[i] = a.samples[i] + b.samples[i];
  const auto cfg = StftConfig::enhancement();
  auto sa = dsp::stft(a, cfg), sb = dsp::stft(b, cfg), ss = dsp::stft(sum, cfg);
  for (size_t i = 0; i < ss.re.size(); ++i) {
    CHECK(ss.re[i] == doctest::Approx(sa.re[i] + sb.re[i]).epsilon(1e-10).scale(1.0));
    CHECK(ss.im[i] == doctest::Approx(sa.im[i] + sb.im[i]).epsilon(1e-10).scale(1.0));
  }
}

TEST_CASE("parseval holds for a rectangular-window frame") {
  StftConfig cfg{32.0, 10.0, 512, dsp::WindowKind::Rect};
  Waveform w = random_wave(512, 3);
  auto spec = dsp::stft(w, cfg);
  REQUIRE(spec.frames == 1);
  double spec_energy = 0.0;
  for (int b = 0; b < spec.bins; ++b) {
    const double m = spec.re[size_t(b)] * spec.re[size_t(b)] + spec.im[size_t(b)] * spec.im[size_t(b)];
    // onesided storage: interior bins represent two conjugate bins
    spec_energy += (b == 0 || b == spec.bins - 1) ? m : 2.0 * m;
  }
  double frame_energy = 0.0;
  for (double v : w.samples) frame_energy += v * v;
  CHECK(spec_energy == doctest::Approx(cfg.fft_size * frame_energy).epsilon(1e-8));
}

TEST_CASE("istft reconstructs interior samples under both configs") {
  for (const auto& cfg : {StftConfig::enhancement(), StftConfig::asr()}) {
    for (uint64_t seed = 0; seed < 3; ++seed) {
      Waveform w = random_wave(16000, seed + 10);
      Waveform back = dsp::istft(dsp::stft(w, cfg), cfg, w.length());
      const int frame = cfg.frame_samples();
      CHECK(rel_l2(back.samples, w.samples, frame, w.length() - frame) < 1e-6);
    }
  }
}

TEST_CASE("istft of the zero spectrogram is the zero waveform") {
  dsp::ComplexSpectrogram spec;
  spec.frames = 10;
  spec.bins = 257;
  spec.re.assign(size_t(10) * 257, 0.0);
  spec.im.assign(size_t(10) * 257, 0.0);
  Waveform w = dsp::istft(spec, StftConfig::enhancement());
  for (double v : w.samples) CHECK(v == 0.0);
}

TEST_CASE("istft round trip on a speech-like AM tone") {
  const auto cfg = StftConfig::enhancement();
  Waveform w;
  w.samples.resize(16000);
  for (int i = 0; i < 16000; ++i) {
    const double t = double(i) / dsp::kSampleRate;
    w.samples[size_t(i)] = (0.4 + 0.3 * std::sin(2 * M_PI * 3.0 * t)) * std::sin(2 * M_PI * 440.0 * t);
  }
  Waveform back = dsp::istft(dsp::stft(w, cfg), cfg, w.length());
  const int frame = cfg.frame_samples();
  CHECK(rel_l2(back.samples, w.samples, frame, w.length() - frame) < 1e-6);
}

TEST_CASE("istft rejects a bin-count mismatch") {
  dsp::ComplexSpectrogram spec;
  spec.frames = 4;
  spec.bins = 100;
  spec.re.assign(400, 0.0);
  spec.im.assign(400, 0.0);
  CHECK_THROWS_AS(dsp::istft(spec, StftConfig::enhancement()), std::invalid_argument);
}

TEST_CASE("logmel has the documented framing and dimensionality") {
  Waveform w = random_wave(16000, 4);
  auto f = dsp::logmel(w);
  CHECK(f.dims == 80);
  CHECK(f.frames == 1 + (16000 - 256) / 160);  // 99 frames for 1 s
}

TEST_CASE("scaling the waveform by 2 shifts log energies by log 4") {
  Waveform w = cosine_wave(1000.0, 8000, 0.3);
  Waveform w2 = w;
  for (double& v : w2.samples) v *= 2.0;
  auto a = dsp::logmel(w), b = dsp::logmel(w2);
  // pick a well-energized coefficient (the 1 kHz region) and compare
  int best = 0;
  double best_v = -1e300;
  for (int d = 0; d < 80; ++d) {
    if (a.at(2, d) > best_v) {
      best_v = a.at(2, d);
      best = d;
    }
  }
  for (int t = 1; t + 1 < a.frames; ++t) {
    CHECK(b.at(t, best) - a.at(t, best) == doctest::Approx(std::log(4.0)).epsilon(1e-6));
  }
}

TEST_CASE("a 1 kHz tone peaks in the filter whose center is nearest 1 kHz") {
  Waveform w = cosine_wave(1000.0, 16000, 0.4);
  auto f = dsp::logmel(w);
  int argmax = 0;
  double best = -1e300;
  for (int d = 0; d < 80; ++d) {
    if (f.at(f.frames / 2, d) > best) {
      best = f.at(f.frames / 2, d);
      argmax = d;
    }
  }
  // oracle: evaluate the triangle bank directly at 1 kHz's DFT bin energies
  const auto& bank = dsp::mel_bank(256, 80);
  std::vector<double> frame(256);
  for (int i = 0; i < 256; ++i) frame[size_t(i)] = w.samples[size_t(8000 + i)];
  // apply the same analysis window as logmel
  const auto win = dsp::make_window(StftConfig::asr());
  for (int i = 0; i < 256; ++i) frame[size_t(i)] *= win[size_t(i)];
  std::vector<double> re, im;
  naive_dft(frame, 256, re, im);
  int oracle_arg = 0;
  double oracle_best = -1e300;
  for (int d = 0; d < 80; ++d) {
    double acc = 0;
    for (int k = 0; k < 129; ++k) {
      acc += (re[size_t(k)] * re[size_t(k)] + im[size_t(k)] * im[size_t(k)]) * bank[size_t(k) * 80 + d];
    }
    if (acc > oracle_best) {
      oracle_best = acc;
      oracle_arg = d;
    }
  }
  CHECK(argmax == oracle_arg);
  // and that filter's center frequency is indeed the closest to 1 kHz
  const double mel_max = dsp::hz_to_mel(8000.0);
  int nearest = 0;
  double nearest_d = 1e300;
  for (int d = 0; d < 80; ++d) {
    const double center = dsp::mel_to_hz(mel_max * (d + 1) / 81.0);
    if (std::fabs(center - 1000.0) < nearest_d) {
      nearest_d = std::fabs(center - 1000.0);
      nearest = d;
    }
  }
  CHECK(argmax == nearest);
}

TEST_CASE("normalize_utterance yields zero mean and unit variance per coefficient") {
  Rng rng(9);
  dsp::FeatureMatrix f;
  f.frames = 50;
  f.dims = 80;
  f.values.resize(size_t(50) * 80);
  for (double& v : f.values) v = rng.uniform(-3.0, 7.0);
  auto n = dsp::normalize_utterance(f);
  for (int d = 0; d < n.dims; ++d) {
    double mean = 0;
    for (int t = 0; t < n.frames; ++t) mean += n.at(t, d);
    mean /= n.frames;
    CHECK(std::fabs(mean) < 1e-9);
    double var = 0;
    for (int t = 0; t < n.frames; ++t) var += (n.at(t, d) - mean) * (n.at(t, d) - mean);
    var /= n.frames;
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("normalize_utterance maps constant inputs to zeros") {
  dsp::FeatureMatrix f;
  f.frames = 10;
  f.dims = 4;
  f.values.assign(40, 3.25);
  auto n = dsp::normalize_utterance(f);
  for (double v : n.values) CHECK(v == 0.0);
}

TEST_CASE("normalize_utterance is affine-invariant per column") {
  Rng rng(12);
  dsp::FeatureMatrix f;
  f.frames = 30;
  f.dims = 8;
  f.values.resize(240);
  for (double& v : f.values) v = rng.uniform(-1.0, 1.0);
  dsp::FeatureMatrix f2 = f;
  for (double& v : f2.values) v = 2.5 * v + 0.7;
  auto a = dsp::normalize_utterance(f), b = dsp::normalize_utterance(f2);
  for (size_t i = 0; i < a.values.size(); ++i) {
    CHECK(a.values[i] == doctest::Approx(b.values[i]).epsilon(1e-9).scale(1.0));
  }
}

TEST_CASE("mix_at_snr hits the requested SNR") {
  Waveform s = random_wave(8000, 20, 0.3);
  Waveform n = random_wave(8000, 21, 0.3);

  SUBCASE("equal-power signals at 0 dB leave the noise unscaled") {
    // make powers exactly equal
    double ps = 0, pn = 0;
    for (size_t i = 0; i < s.samples.size(); ++i) {
      ps += s.samples[i] * s.samples[i];
      pn += n.samples[i] * n.samples[i];
    }
    Waveform n2 = n;
    const double k = std::sqrt(ps / pn);
    for (double& v : n2.samples) v *= k;
    auto r = dsp::mix_at_snr(s, n2, 0.0);
    CHECK(r.noise_scale == doctest::Approx(1.0).epsilon(1e-9));
  }

  SUBCASE("very high SNR returns approximately the clean signal") {
    auto r = dsp::mix_at_snr(s, n, 100.0);
    double num = 0, den = 0;
    for (size_t i = 0; i < s.samples.size(); ++i) {
      const double d = r.mixed.samples[i] / r.rescale - s.samples[i];
      num += d * d;
      den += s.samples[i] * s.samples[i];
    }
    CHECK(std::sqrt(num / den) < 1e-4);
  }

  SUBCASE("snr 5 dB on unit-power speech and 4x-power noise scales by 1/(2*10^0.25)") {
    Waveform su, nu;
    su.samples.resize(4000);
    nu.samples.resize(4000);
    Rng rng(22);
    for (auto& v : su.samples) v = rng.uniform(-0.5, 0.5);
    for (auto& v : nu.samples) v = rng.uniform(-0.5, 0.5);
    double ps = 0, pn = 0;
    for (size_t i = 0; i < su.samples.size(); ++i) {
      ps += su.samples[i] * su.samples[i];
      pn += nu.samples[i] * nu.samples[i];
    }
    for (auto& v : su.samples) v /= std::sqrt(ps / 4000);        // unit power
    for (auto& v : nu.samples) v *= 2.0 / std::sqrt(pn / 4000);  // 4x power
    auto r = dsp::mix_at_snr(su, nu, 5.0);
    CHECK(r.noise_scale == doctest::Approx(1.0 / (2.0 * std::pow(10.0, 0.25))).epsilon(1e-6));
    // measured SNR matches the request within 0.01 dB (pre-rescale)
    double pn2 = 0;
    for (size_t i = 0; i < nu.samples.size(); ++i) {
      const double scaled = nu.samples[i] * r.noise_scale;
      pn2 += scaled * scaled;
    }
    const double measured = 10.0 * std::log10(4000.0 / pn2);
    CHECK(measured == doctest::Approx(5.0).epsilon(0.002));
  }

  SUBCASE("silent inputs are rejected") {
    Waveform z;
    z.samples.assign(1000, 0.0);
    CHECK_THROWS_AS(dsp::mix_at_snr(z, n, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(dsp::mix_at_snr(s, z, 0.0), std::invalid_argument);
  }
}

TEST_CASE("measured SNR property across random draws") {
  Rng rng(30);
  for (int trial = 0; trial < 10; ++trial) {
    Waveform s = random_wave(6000, 100 + trial, 0.4);
    Waveform n = random_wave(6000, 200 + trial, 0.2);
    const double target = rng.uniform(-5.0, 25.0);
    auto r = dsp::mix_at_snr(s, n, target);
    double ps = 0, pn = 0;
    for (size_t i = 0; i < s.samples.size(); ++i) {
      ps += s.samples[i] * s.samples[i];
      const double ni = r.noise_scale * n.samples[i % n.samples.size()];
      pn += ni * ni;
    }
    const double measured = 10.0 * std::log10(ps / pn);
    CHECK(std::fabs(measured - target) < 0.01);
  }
}

TEST_CASE("wav files round trip within quantization error") {
  namespace fs = std::filesystem;
  fs::create_directories("/tmp/enhasr-test-dsp");
  Waveform w = random_wave(3000, 40, 0.8);
  const std::string path = "/tmp/enhasr-test-dsp/roundtrip.wav";
  dsp::write_wav(path, w);
  Waveform back = dsp::read_wav(path);
  REQUIRE(back.length() == w.length());
  CHECK(back.sample_rate == 16000);
  for (int i = 0; i < w.length(); ++i) {
    CHECK(std::fabs(back.samples[size_t(i)] - w.samples[size_t(i)]) <= 1.0 / 32768.0);
  }
  CHECK_THROWS_AS(dsp::read_wav("/tmp/enhasr-test-dsp/nope.wav"), DataError);
}

TEST_CASE("differentiable stft/istft/logmel agree with the plain versions and pass grad checks") {
  Waveform w = random_wave(1200, 50, 0.4);
  const auto cfg = StftConfig::toy();

  ag::Graph plain(false);
  ag::Tensor spec = dsp::g_stft(plain, dsp::to_tensor(w), cfg);
  auto spec_plain = dsp::stft(w, cfg);
  CHECK(dsp::tensor_to_spec(spec).re == spec_plain.re);
  CHECK(dsp::tensor_to_spec(spec).im == spec_plain.im);

  // stft gradient
  ag::Tensor wt = dsp::to_tensor(w);
  double err = ag::grad_check(
      [&](ag::Graph& g, const ag::Tensor& x) { return g.mean(g.square(dsp::g_stft(g, x, cfg))); },
      wt, 1e-5, 40, 7);
  CHECK(err < 1e-4);

  // istft gradient
  ag::Tensor spec_t = dsp::to_tensor(spec_plain);
  err = ag::grad_check(
      [&](ag::Graph& g, const ag::Tensor& x) {
        return g.mean(g.square(dsp::g_istft(g, x, cfg, 1200)));
      },
      spec_t, 1e-5, 40, 8);
  CHECK(err < 1e-4);

  // logmel + normalize chain gradient (uses the asr config internally)
  Waveform longer = random_wave(1600, 51, 0.4);
  ag::Tensor lt = dsp::to_tensor(longer);
  err = ag::grad_check(
      [&](ag::Graph& g, const ag::Tensor& x) {
        return g.mean(g.square(dsp::g_normalize(g, dsp::g_logmel(g, x))));
      },
      lt, 1e-5, 30, 9);
  CHECK(err < 1e-4);
}

TEST_SUITE_END();

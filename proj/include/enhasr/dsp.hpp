// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <string>
#include <vector>

#include "enhasr/tensor.hpp"

namespace enhasr::dsp {

inline constexpr int kSampleRate = 16000;
inline constexpr int kNumMels = 80;
inline constexpr double kMelPowerFloor = 1e-10;

struct Waveform {
  std::vector<double> samples;
  int sample_rate = kSampleRate;
  int length() const { return int(samples.size()); }
  double duration_s() const { return double(samples.size()) / sample_rate; }
};

enum class WindowKind { SqrtHann, Rect };

struct StftConfig {
  double frame_ms = 32.0;
  double shift_ms = 10.0;
  int fft_size = 512;
  WindowKind window = WindowKind::SqrtHann;

  int frame_samples(int sr = kSampleRate) const { return int(frame_ms * sr / 1000.0 + 0.5); }
  int shift_samples(int sr = kSampleRate) const { return int(shift_ms * sr / 1000.0 + 0.5); }
  int bins() const { return fft_size / 2 + 1; }

  // enhancement front-end: 32 ms frames, 10 ms shift, 257 bins
  static StftConfig enhancement() { return StftConfig{32.0, 10.0, 512, WindowKind::SqrtHann}; }
  // ASR feature analysis: 16 ms frames, 10 ms shift
  static StftConfig asr() { return StftConfig{16.0, 10.0, 256, WindowKind::SqrtHann}; }
  // desk-scale enhancement analysis matching the 33-bin toy DCRN chain
  static StftConfig toy() { return StftConfig{4.0, 2.0, 64, WindowKind::SqrtHann}; }
};

struct ComplexSpectrogram {
  int frames = 0;
  int bins = 0;
  std::vector<double> re, im;  // frames x bins, row-major
  double& real_at(int t, int f) { return re[size_t(t) * bins + f]; }
  double& imag_at(int t, int f) { return im[size_t(t) * bins + f]; }
  double real_at(int t, int f) const { return re[size_t(t) * bins + f]; }
  double imag_at(int t, int f) const { return im[size_t(t) * bins + f]; }
};

struct FeatureMatrix {
  int frames = 0;
  int dims = 0;
  std::vector<double> values;  // frames x dims
  double& at(int t, int d) { return values[size_t(t) * dims + d]; }
  double at(int t, int d) const { return values[size_t(t) * dims + d]; }
};

std::vector<double> make_window(const StftConfig& cfg);

ComplexSpectrogram stft(const Waveform& w, const StftConfig& cfg);
// Overlap-add with synthesis-window normalization. out_len < 0 keeps the
// natural length (frames-1)*shift + frame.
Waveform istft(const ComplexSpectrogram& spec, const StftConfig& cfg, int out_len = -1);

FeatureMatrix logmel(const Waveform& w);
FeatureMatrix normalize_utterance(const FeatureMatrix& f);

struct MixResult {
  Waveform mixed;
  double noise_scale = 1.0;  // gain applied to the noise to hit the target SNR
  double rescale = 1.0;      // gain applied to the sum to stay inside [-1, 1]
};
MixResult mix_at_snr(const Waveform& s, const Waveform& n, double snr_db);

// Mel triangle bank spanning 0..sr/2, evaluated at the rfft bin centers.
// Returned matrix is [bins, n_mels], row-major.
const std::vector<double>& mel_bank(int fft_size, int n_mels, int sr = kSampleRate);
double hz_to_mel(double hz);
double mel_to_hz(double mel);

Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);

// tensor bridges
ag::Tensor to_tensor(const Waveform& w);
ag::Tensor to_tensor(const ComplexSpectrogram& s);  // [2, T, F]
ag::Tensor to_tensor(const FeatureMatrix& f);       // [T, D]
Waveform tensor_to_wave(const ag::Tensor& t);
ComplexSpectrogram tensor_to_spec(const ag::Tensor& t);
FeatureMatrix tensor_to_features(const ag::Tensor& t);

// differentiable versions used in joint training
ag::Tensor g_stft(ag::Graph& g, const ag::Tensor& wave, const StftConfig& cfg);  // [N] -> [2,T,F]
ag::Tensor g_istft(ag::Graph& g, const ag::Tensor& spec, const StftConfig& cfg, int out_len);
ag::Tensor g_logmel(ag::Graph& g, const ag::Tensor& wave);                       // [N] -> [T,80]
ag::Tensor g_normalize(ag::Graph& g, const ag::Tensor& feats);

}  // namespace enhasr::dsp

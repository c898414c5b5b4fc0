// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "enhasr/dsp.hpp"
#include "enhasr/nn.hpp"
#include "enhasr/tensor.hpp"

namespace enhasr::dcrn {

struct StageSpec {
  int channels = 0;
  int freq = 0;
  bool operator==(const StageSpec&) const = default;
};

struct DcrnConfig {
  // full (channels, freq) chain: input, encoder stages, then decoder stages
  std::vector<StageSpec> layer_specs;
  int blstm_state = 512;
  int dense_depth = 5;
  int dense_stages = 5;  // innermost encoder/decoder stages followed by a dense block
  std::pair<int, int> kernel_interior = {3, 3};
  std::pair<int, int> kernel_boundary = {5, 5};
  dsp::StftConfig stft = dsp::StftConfig::enhancement();

  int input_bins() const { return layer_specs.front().freq; }
  int encoder_stages() const { return int(layer_specs.size()) / 2; }

  // published chain: (2,257),(32,128),...,(512,1),...,(32,128),(2,257)
  static DcrnConfig paper();
  // (2,33)->(8,16)->(16,8)->(32,4)->(64,2)->(128,1)->mirror
  static DcrnConfig toy();
  // pared-down preset for desk-scale training runs
  static DcrnConfig tiny();
};

// Throws invalid_argument on asymmetric chains or freq steps the stride-2 /
// sub-pixel geometry cannot produce.
void validate(const DcrnConfig& cfg);

struct ConvLayer {
  ag::Tensor w, b;
  ag::ConvSpec spec;
};

struct DenseBlock {
  std::vector<ConvLayer> layers;  // layer k consumes (k+1)*C channels, emits C
};

struct EncoderStage {
  ConvLayer conv;
  std::optional<DenseBlock> dense;
  StageSpec out;
};

struct DecoderStage {
  ConvLayer conv;  // emits 2*out.channels, sub-pixel shuffled to out.channels
  std::optional<DenseBlock> dense;
  StageSpec out;
  int crop = 0;  // top bins dropped after the shuffle (0 or 1)
  bool final_stage = false;
};

struct EnhancementModel {
  DcrnConfig config;
  std::vector<EncoderStage> encoder;
  nn::BlstmParams blstm1, blstm2;
  nn::Linear proj;
  std::vector<DecoderStage> decoder;

  ag::NamedTensors named_parameters() const;
  int64_t param_count() const;
};

EnhancementModel build_dcrn(const DcrnConfig& cfg, uint64_t seed);

EnhancementModel clone(const EnhancementModel& m);

struct StageTrace {
  std::string name;  // input / enc<i> / blstm / dec<j> / output
  int channels = 0, frames = 0, freq = 0;
};

ag::Tensor dense_block_forward(ag::Graph& g, const DenseBlock& block, const ag::Tensor& x);

// X: [2, T, F] -> S_hat: [2, T, F]
ag::Tensor dcrn_forward(ag::Graph& g, const EnhancementModel& m, const ag::Tensor& x,
                        std::vector<StageTrace>* trace = nullptr);
dsp::ComplexSpectrogram dcrn_forward(const EnhancementModel& m, const dsp::ComplexSpectrogram& x);

// stft -> dcrn -> istft; output length equals input length (edge-padded)
dsp::Waveform enhance(const EnhancementModel& m, const dsp::Waveform& x);
ag::Tensor g_enhance(ag::Graph& g, const EnhancementModel& m, const ag::Tensor& wave);

// mean absolute error over the real and imaginary planes
double enhancement_loss(const dsp::ComplexSpectrogram& est, const dsp::ComplexSpectrogram& ref);
ag::Tensor g_enhancement_loss(ag::Graph& g, const ag::Tensor& est, const ag::Tensor& ref);

// (channels, freq) chain implied by the config; equals layer_specs when valid
std::vector<StageSpec> stage_chain(const DcrnConfig& cfg);

}  // namespace enhasr::dcrn

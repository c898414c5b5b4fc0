// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include "enhasr/dsp.hpp"
#include "enhasr/nn.hpp"
#include "enhasr/tensor.hpp"

namespace enhasr::selection {

// Fixed architecture: input linear (128) -> 2 BLSTM (state 128 per direction)
// -> output linear -> sigmoid. Input is the concatenation of the original and
// enhanced feature frames.
struct SelectionModel {
  int feat_dim = dsp::kNumMels;
  int hidden = 128;
  nn::Linear input;  // [2*feat, 128]
  nn::BlstmParams blstm1, blstm2;
  nn::Linear output;  // [256, feat]

  ag::NamedTensors named_parameters() const;
};

SelectionModel build_selection(int feat_dim, uint64_t seed);

SelectionModel clone(const SelectionModel& sm);

// p(t,f) in (0,1), one reliability score per time-frequency bin.
ag::Tensor selection_forward(ag::Graph& g, const SelectionModel& sm, const ag::Tensor& a,
                             const ag::Tensor& a_hat);

// a_bar = p * a + (1-p) * a_hat, per bin.
ag::Tensor select_features(ag::Graph& g, const ag::Tensor& p, const ag::Tensor& a,
                           const ag::Tensor& a_hat);

dsp::FeatureMatrix selection_mask(const SelectionModel& sm, const dsp::FeatureMatrix& a,
                                  const dsp::FeatureMatrix& a_hat);
dsp::FeatureMatrix select_features(const dsp::FeatureMatrix& p, const dsp::FeatureMatrix& a,
                                   const dsp::FeatureMatrix& a_hat);

}  // namespace enhasr::selection

// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <string>
#include <vector>

#include "enhasr/dsp.hpp"
#include "enhasr/nn.hpp"
#include "enhasr/tensor.hpp"

namespace enhasr::rnnt {

// Label ids: blank = 0, symbols at 1..|Y|. |Ybar| = |Y| + 1.
struct Vocabulary {
  std::vector<std::string> symbols;
  int blank_id = 0;

  int size_with_blank() const { return int(symbols.size()) + 1; }
  int id_of(const std::string& symbol) const;
  const std::string& symbol_of(int id) const;
  std::vector<int> encode(const std::string& text) const;   // one char per symbol
  std::string decode(const std::vector<int>& ids) const;
};

Vocabulary load_vocabulary(const std::string& path);
void save_vocabulary(const std::string& path, const Vocabulary& v);

struct RnntConfig {
  int feat_dim = dsp::kNumMels;
  int encoder_layers = 5;
  int encoder_hidden = 800;  // per direction
  int decoder_layers = 2;
  int decoder_hidden = 160;
  int joint_hidden = 1024;
  int embed_dim = 160;
  std::vector<int> subsample_after = {1, 2};  // 1-based encoder layer indices
  int vocab_size = 0;                         // |Ybar| including blank

  // 5 BLSTM x 800, 2 LSTM x 160, joint 1024, 2x time subsampling twice
  static RnntConfig paper(int vocab_with_blank);
  // desk-scale: 2 BLSTM x 64, 1 LSTM x 32, joint 64
  static RnntConfig desk(int vocab_with_blank);
};

struct RnntModel {
  RnntConfig config;
  std::vector<nn::BlstmParams> encoder;
  ag::Tensor embedding;  // [V, E]
  std::vector<nn::LstmParams> decoder;
  nn::Linear joint_enc, joint_pred, joint_out;

  ag::NamedTensors named_parameters() const;
};

RnntModel build_rnnt(const RnntConfig& cfg, uint64_t seed);

struct PosteriorGrid {
  int frames = 0;  // T'
  int labels = 0;  // U
  int vocab = 0;   // |Ybar|
  ag::Tensor logits;     // [T', U+1, V]
  ag::Tensor log_probs;  // log-softmax of logits over the label axis
};

// [T, feat] -> [T', 2*encoder_hidden] with T' = ceil(ceil(T/2)/2) for the
// default two subsamplings.
ag::Tensor encode(ag::Graph& g, const RnntModel& m, const ag::Tensor& feats);

// Label sequence (blank-free) -> [U+1, decoder_hidden]; row 0 conditions on
// the blank start token only.
ag::Tensor predict(ag::Graph& g, const RnntModel& m, const std::vector<int>& y);

PosteriorGrid joint(ag::Graph& g, const RnntModel& m, const ag::Tensor& h_enc,
                    const ag::Tensor& h_pred);

// encode + predict + joint
PosteriorGrid posterior_grid(ag::Graph& g, const RnntModel& m, const ag::Tensor& feats,
                             const std::vector<int>& y);

// Exact transducer loss: -log P(y|a) marginalized over all monotonic
// alignments, computed in the log domain; analytic gradient via forward and
// backward occupancies.
ag::Tensor rnnt_loss(ag::Graph& g, const PosteriorGrid& grid, const std::vector<int>& y,
                     int blank = 0);

// Forward/backward lattice variables over a raw log-prob grid; exposed for
// consistency checks and the python bindings.
struct RnntLattice {
  std::vector<double> alpha, beta;  // [T, U+1], log domain
  double log_prob_alpha = 0.0;      // total from the alpha recursion
  double log_prob_beta = 0.0;       // total from the beta recursion
};
RnntLattice rnnt_lattice(const std::vector<double>& log_probs, int t_len, int u1, int vocab,
                         const std::vector<int>& y, int blank);

// loss and gradient w.r.t. the raw grid (flat [T,U+1,V]) without a model
double rnnt_loss_grid(const std::vector<double>& log_probs, int t_len, int u1, int vocab,
                      const std::vector<int>& y, int blank, std::vector<double>* grad_log_probs);

RnntModel clone(const RnntModel& m);

std::vector<int> greedy_decode(const RnntModel& m, const dsp::FeatureMatrix& feats,
                               int max_symbols_per_frame = 4);

}  // namespace enhasr::rnnt

// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <string>
#include <vector>

#include "enhasr/tensor.hpp"

namespace enhasr::nn {

struct Linear {
  ag::Tensor w;  // [in, out]
  ag::Tensor b;  // [out]

  // x: [T, in] -> [T, out]
  ag::Tensor apply(ag::Graph& g, const ag::Tensor& x) const {
    return g.add_cols(g.matmul(x, w), b);
  }
  int in_dim() const { return w.dim(0); }
  int out_dim() const { return w.dim(1); }
};

Linear make_linear(int in, int out, Rng& rng);

struct LstmParams {
  ag::Tensor w_ih;  // [in, 4H], gate order (i, f, g, o)
  ag::Tensor w_hh;  // [H, 4H]
  ag::Tensor bias;  // [4H], forget gate portion initialized to 1
  int hidden = 0;
};

LstmParams make_lstm(int input, int hidden, Rng& rng);

// Runs the cell over all rows of x ([T, D]); returns hidden states [T, H].
ag::Tensor lstm_sequence(ag::Graph& g, const ag::Tensor& x, const LstmParams& p, bool reverse);

struct BlstmParams {
  LstmParams fwd, bwd;
};

BlstmParams make_blstm(int input, int hidden, Rng& rng);

// [T, D] -> [T, 2H], forward and backward passes concatenated per frame.
ag::Tensor blstm(ag::Graph& g, const ag::Tensor& x, const BlstmParams& p);

void collect(ag::NamedTensors& out, const std::string& prefix, const Linear& l);
void collect(ag::NamedTensors& out, const std::string& prefix, const LstmParams& p);
void collect(ag::NamedTensors& out, const std::string& prefix, const BlstmParams& p);

}  // namespace enhasr::nn

// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "enhasr/nn.hpp"

namespace enhasr::nn {

Linear make_linear(int in, int out, Rng& rng) {
  Linear l;
  l.w = ag::init_uniform({in, out}, in, rng);
  l.b = ag::init_uniform({out}, in, rng);
  return l;
}

LstmParams make_lstm(int input, int hidden, Rng& rng) {
  LstmParams p;
  p.hidden = hidden;
  p.w_ih = ag::init_uniform({input, 4 * hidden}, input, rng);
  p.w_hh = ag::init_uniform({hidden, 4 * hidden}, hidden, rng);
  p.bias = ag::init_uniform({4 * hidden}, hidden, rng);
  for (int j = 0; j < hidden; ++j) p.bias.mutable_data()[size_t(hidden + j)] = 1.0;
  return p;
}

ag::Tensor lstm_sequence(ag::Graph& g, const ag::Tensor& x, const LstmParams& p, bool reverse) {
  const int t = x.dim(0);
  const int g4 = 4 * p.hidden;
  ag::Tensor gates = g.matmul(x, p.w_ih);  // [T, 4H]
  ag::Tensor h = ag::Tensor::zeros({p.hidden});
  ag::Tensor c = ag::Tensor::zeros({p.hidden});
  std::vector<ag::Tensor> rows(static_cast<size_t>(t));
  for (int k = 0; k < t; ++k) {
    const int ti = reverse ? t - 1 - k : k;
    ag::Tensor gx = g.reshape(g.slice(gates, 0, ti, ti + 1), {g4});
    auto [hn, cn] = g.lstm_cell_pre(gx, h, c, p.w_hh, p.bias);
    h = hn;
    c = cn;
    rows[size_t(ti)] = g.reshape(hn, {1, p.hidden});
  }
  return g.concat(rows, 0);
}

BlstmParams make_blstm(int input, int hidden, Rng& rng) {
  return BlstmParams{make_lstm(input, hidden, rng), make_lstm(input, hidden, rng)};
}

ag::Tensor blstm(ag::Graph& g, const ag::Tensor& x, const BlstmParams& p) {
  return g.concat({lstm_sequence(g, x, p.fwd, false), lstm_sequence(g, x, p.bwd, true)}, 1);
}

void collect(ag::NamedTensors& out, const std::string& prefix, const Linear& l) {
  out.emplace_back(prefix + ".w", l.w);
  out.emplace_back(prefix + ".b", l.b);
}

void collect(ag::NamedTensors& out, const std::string& prefix, const LstmParams& p) {
  out.emplace_back(prefix + ".w_ih", p.w_ih);
  out.emplace_back(prefix + ".w_hh", p.w_hh);
  out.emplace_back(prefix + ".bias", p.bias);
}

void collect(ag::NamedTensors& out, const std::string& prefix, const BlstmParams& p) {
  collect(out, prefix + ".fwd", p.fwd);
  collect(out, prefix + ".bwd", p.bwd);
}

}  // namespace enhasr::nn

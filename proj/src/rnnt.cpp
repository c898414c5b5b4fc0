// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "enhasr/rnnt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "enhasr/errors.hpp"

namespace enhasr::rnnt {

namespace {

constexpr double kLogZero = -std::numeric_limits<double>::infinity();

double log_sum_exp(double a, double b) {
  if (a == kLogZero) return b;
  if (b == kLogZero) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

void check_labels(const std::vector<int>& y, int vocab, int blank) {
  for (int id : y) {
    if (id < 0 || id >= vocab || id == blank) {
      throw std::invalid_argument("rnnt: out-of-vocabulary label id " + std::to_string(id) +
                                  " (vocab " + std::to_string(vocab) + ", blank " +
                                  std::to_string(blank) + ")");
    }
  }
}

}  // namespace

int Vocabulary::id_of(const std::string& symbol) const {
  for (size_t i = 0; i < symbols.size(); ++i) {
    if (symbols[i] == symbol) return int(i) + 1;
  }
  throw std::invalid_argument("vocabulary: unknown symbol '" + symbol + "'");
}

const std::string& Vocabulary::symbol_of(int id) const {
  if (id <= 0 || id > int(symbols.size())) {
    throw std::invalid_argument("vocabulary: bad symbol id " + std::to_string(id));
  }
  return symbols[size_t(id - 1)];
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(id_of(std::string(1, c)));
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) out += symbol_of(id);
  return out;
}

Vocabulary load_vocabulary(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("vocabulary: cannot open " + path);
  Vocabulary v;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) v.symbols.push_back(line);
  }
  if (v.symbols.empty()) throw DataError("vocabulary: no symbols in " + path);
  return v;
}

void save_vocabulary(const std::string& path, const Vocabulary& v) {
  std::ofstream os(path);
  if (!os) throw DataError("vocabulary: cannot open for writing " + path);
  for (const auto& s : v.symbols) os << s << "\n";
}

RnntConfig RnntConfig::paper(int vocab_with_blank) {
  RnntConfig c;
  c.vocab_size = vocab_with_blank;
  return c;
}

RnntConfig RnntConfig::desk(int vocab_with_blank) {
  RnntConfig c;
  c.encoder_layers = 2;
  c.encoder_hidden = 64;
  c.decoder_layers = 1;
  c.decoder_hidden = 32;
  c.joint_hidden = 64;
  c.embed_dim = 32;
  c.vocab_size = vocab_with_blank;
  return c;
}

RnntModel build_rnnt(const RnntConfig& cfg, uint64_t seed) {
  if (cfg.vocab_size < 2) throw std::invalid_argument("build_rnnt: vocab_size must include blank and symbols");
  Rng rng(Rng::derive({seed, 0x524e4e54}));
  RnntModel m;
  m.config = cfg;
  int in = cfg.feat_dim;
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    m.encoder.push_back(nn::make_blstm(in, cfg.encoder_hidden, rng));
    in = 2 * cfg.encoder_hidden;
  }
  m.embedding = ag::init_uniform({cfg.vocab_size, cfg.embed_dim}, cfg.embed_dim, rng);
  in = cfg.embed_dim;
  for (int l = 0; l < cfg.decoder_layers; ++l) {
    m.decoder.push_back(nn::make_lstm(in, cfg.decoder_hidden, rng));
    in = cfg.decoder_hidden;
  }
  m.joint_enc = nn::make_linear(2 * cfg.encoder_hidden, cfg.joint_hidden, rng);
  m.joint_pred = nn::make_linear(cfg.decoder_hidden, cfg.joint_hidden, rng);
  m.joint_out = nn::make_linear(cfg.joint_hidden, cfg.vocab_size, rng);
  return m;
}

ag::NamedTensors RnntModel::named_parameters() const {
  ag::NamedTensors out;
  for (size_t l = 0; l < encoder.size(); ++l) {
    nn::collect(out, "encoder." + std::to_string(l), encoder[l]);
  }
  out.emplace_back("embedding", embedding);
  for (size_t l = 0; l < decoder.size(); ++l) {
    nn::collect(out, "decoder." + std::to_string(l), decoder[l]);
  }
  nn::collect(out, "joint.enc", joint_enc);
  nn::collect(out, "joint.pred", joint_pred);
  nn::collect(out, "joint.out", joint_out);
  return out;
}

RnntModel clone(const RnntModel& m) {
  RnntModel out = build_rnnt(m.config, 1);
  ag::copy_parameters(out.named_parameters(), m.named_parameters());
  return out;
}

ag::Tensor encode(ag::Graph& g, const RnntModel& m, const ag::Tensor& feats) {
  if (feats.ndim() != 2 || feats.dim(1) != m.config.feat_dim) {
    throw std::invalid_argument("encode: expects [T," + std::to_string(m.config.feat_dim) +
                                "], got " + ag::shape_str(feats.shape()));
  }
  const int min_frames = 1 << int(m.config.subsample_after.size());
  if (feats.dim(0) < min_frames) {
    throw std::invalid_argument("encode: input of " + std::to_string(feats.dim(0)) +
                                " frames is too short (need >= " + std::to_string(min_frames) + ")");
  }
  ag::Tensor h = feats;
  for (int l = 0; l < m.config.encoder_layers; ++l) {
    h = nn::blstm(g, h, m.encoder[size_t(l)]);
    const auto& ss = m.config.subsample_after;
    if (std::find(ss.begin(), ss.end(), l + 1) != ss.end()) h = g.subsample_rows(h);
  }
  return h;
}

ag::Tensor predict(ag::Graph& g, const RnntModel& m, const std::vector<int>& y) {
  check_labels(y, m.config.vocab_size, 0);
  const int u1 = int(y.size()) + 1;
  std::vector<ag::Tensor> rows;
  rows.reserve(size_t(u1));
  // y_0 is the blank start token
  rows.push_back(g.slice(m.embedding, 0, 0, 1));
  for (int id : y) rows.push_back(g.slice(m.embedding, 0, id, id + 1));
  ag::Tensor h = g.concat(rows, 0);  // [U+1, E]
  for (const auto& layer : m.decoder) h = nn::lstm_sequence(g, h, layer, false);
  return h;
}

PosteriorGrid joint(ag::Graph& g, const RnntModel& m, const ag::Tensor& h_enc,
                    const ag::Tensor& h_pred) {
  const int t = h_enc.dim(0);
  const int u1 = h_pred.dim(0);
  ag::Tensor a = m.joint_enc.apply(g, h_enc);    // [T, J]
  ag::Tensor b = m.joint_pred.apply(g, h_pred);  // [U+1, J]
  ag::Tensor z = g.tanh(g.outer_add_rows(a, b));
  ag::Tensor flat = g.reshape(z, {t * u1, m.config.joint_hidden});
  ag::Tensor logits = g.reshape(m.joint_out.apply(g, flat), {t, u1, m.config.vocab_size});
  PosteriorGrid grid;
  grid.frames = t;
  grid.labels = u1 - 1;
  grid.vocab = m.config.vocab_size;
  grid.logits = logits;
  grid.log_probs = g.log_softmax(logits);
  return grid;
}

PosteriorGrid posterior_grid(ag::Graph& g, const RnntModel& m, const ag::Tensor& feats,
                             const std::vector<int>& y) {
  return joint(g, m, encode(g, m, feats), predict(g, m, y));
}

RnntLattice rnnt_lattice(const std::vector<double>& lp, int t_len, int u1, int vocab,
                         const std::vector<int>& y, int blank) {
  auto at = [&](int t, int u, int v) -> double {
    return lp[(size_t(t) * u1 + size_t(u)) * vocab + size_t(v)];
  };
  RnntLattice lat;
  lat.alpha.assign(size_t(t_len) * u1, kLogZero);
  lat.beta.assign(size_t(t_len) * u1, kLogZero);
  auto a = [&](int t, int u) -> double& { return lat.alpha[size_t(t) * u1 + size_t(u)]; };
  auto b = [&](int t, int u) -> double& { return lat.beta[size_t(t) * u1 + size_t(u)]; };

  a(0, 0) = 0.0;
  for (int t = 1; t < t_len; ++t) a(t, 0) = a(t - 1, 0) + at(t - 1, 0, blank);
  for (int u = 1; u < u1; ++u) a(0, u) = a(0, u - 1) + at(0, u - 1, y[size_t(u - 1)]);
  for (int t = 1; t < t_len; ++t) {
    for (int u = 1; u < u1; ++u) {
      a(t, u) = log_sum_exp(a(t - 1, u) + at(t - 1, u, blank),
                            a(t, u - 1) + at(t, u - 1, y[size_t(u - 1)]));
    }
  }
  lat.log_prob_alpha = a(t_len - 1, u1 - 1) + at(t_len - 1, u1 - 1, blank);

  b(t_len - 1, u1 - 1) = at(t_len - 1, u1 - 1, blank);
  for (int t = t_len - 2; t >= 0; --t) {
    b(t, u1 - 1) = b(t + 1, u1 - 1) + at(t, u1 - 1, blank);
  }
  for (int u = u1 - 2; u >= 0; --u) {
    b(t_len - 1, u) = b(t_len - 1, u + 1) + at(t_len - 1, u, y[size_t(u)]);
  }
  for (int t = t_len - 2; t >= 0; --t) {
    for (int u = u1 - 2; u >= 0; --u) {
      b(t, u) = log_sum_exp(b(t + 1, u) + at(t, u, blank), b(t, u + 1) + at(t, u, y[size_t(u)]));
    }
  }
  lat.log_prob_beta = b(0, 0);
  return lat;
}

double rnnt_loss_grid(const std::vector<double>& lp, int t_len, int u1, int vocab,
                      const std::vector<int>& y, int blank, std::vector<double>* grad) {
  if (t_len < 1) throw std::invalid_argument("rnnt_loss: needs T >= 1");
  if (int(y.size()) != u1 - 1) {
    throw std::invalid_argument("rnnt_loss: label length " + std::to_string(y.size()) +
                                " does not match grid U " + std::to_string(u1 - 1));
  }
  check_labels(y, vocab, blank);
  for (double v : lp) {
    if (std::isnan(v)) throw NumericError("rnnt_loss: NaN in posterior grid");
  }
  RnntLattice lat = rnnt_lattice(lp, t_len, u1, vocab, y, blank);
  const double logp = lat.log_prob_alpha;
  if (grad) {
    grad->assign(lp.size(), 0.0);
    auto a = [&](int t, int u) { return lat.alpha[size_t(t) * u1 + size_t(u)]; };
    auto b = [&](int t, int u) { return lat.beta[size_t(t) * u1 + size_t(u)]; };
    auto gref = [&](int t, int u, int v) -> double& {
      return (*grad)[(size_t(t) * u1 + size_t(u)) * vocab + size_t(v)];
    };
    auto lpat = [&](int t, int u, int v) {
      return lp[(size_t(t) * u1 + size_t(u)) * vocab + size_t(v)];
    };
    // dL/d lp(t,u,v) = -P(path uses transition (t,u,v) | y)
    for (int t = 0; t < t_len; ++t) {
      for (int u = 0; u < u1; ++u) {
        const double base = a(t, u) - logp;
        // blank: advance time, or the terminal blank at (T-1, U)
        if (t + 1 < t_len) {
          gref(t, u, blank) = -std::exp(base + lpat(t, u, blank) + b(t + 1, u));
        } else if (u == u1 - 1) {
          gref(t, u, blank) = -std::exp(base + lpat(t, u, blank));
        }
        // label: advance u
        if (u + 1 < u1) {
          const int v = y[size_t(u)];
          gref(t, u, v) = -std::exp(base + lpat(t, u, v) + b(t, u + 1));
        }
      }
    }
  }
  return -logp;
}

ag::Tensor rnnt_loss(ag::Graph& g, const PosteriorGrid& grid, const std::vector<int>& y,
                     int blank) {
  const int t_len = grid.frames, u1 = grid.labels + 1, vocab = grid.vocab;
  const ag::Tensor& lp = grid.log_probs;
  std::vector<double>* want_grad = nullptr;
  std::vector<double> gtable;
  const bool tracked = g.recording() && g.tracked(lp);
  if (tracked) want_grad = &gtable;
  const double loss = rnnt_loss_grid(lp.data(), t_len, u1, vocab, y, blank, want_grad);
  ag::Tensor out = ag::Tensor::scalar(loss);
  if (tracked) {
    auto table = std::make_shared<std::vector<double>>(std::move(gtable));
    g.add_node({lp}, {out}, [&g, lp, out, table]() {
      const double* gi = g.out_grad(out);
      if (!gi) return;
      auto& buf = g.grad_buf(lp);
      for (size_t i = 0; i < table->size(); ++i) buf[i] += gi[0] * (*table)[i];
    });
  }
  return out;
}

std::vector<int> greedy_decode(const RnntModel& m, const dsp::FeatureMatrix& feats,
                               int max_symbols_per_frame) {
  if (max_symbols_per_frame < 1) {
    throw std::invalid_argument("greedy_decode: max_symbols_per_frame must be >= 1");
  }
  ag::Graph g(false);
  ag::Tensor h_enc = encode(g, m, dsp::to_tensor(feats));
  ag::Tensor a = m.joint_enc.apply(g, h_enc);  // [T, J]
  const int t_len = a.dim(0);
  const int joint = m.config.joint_hidden;
  const int vocab = m.config.vocab_size;

  // incremental prediction-network state
  std::vector<ag::Tensor> hs, cs;
  for (const auto& layer : m.decoder) {
    hs.push_back(ag::Tensor::zeros({layer.hidden}));
    cs.push_back(ag::Tensor::zeros({layer.hidden}));
  }
  auto step_predictor = [&](int token) {
    ag::Tensor x = g.reshape(g.slice(m.embedding, 0, token, token + 1), {m.config.embed_dim});
    for (size_t l = 0; l < m.decoder.size(); ++l) {
      auto [hn, cn] = g.lstm_cell(x, hs[l], cs[l], m.decoder[l].w_ih, m.decoder[l].w_hh,
                                  m.decoder[l].bias);
      hs[l] = hn;
      cs[l] = cn;
      x = hn;
    }
    return x;  // [H]
  };

  std::vector<int> out;
  ag::Tensor pred = step_predictor(0);  // start with the blank token
  for (int t = 0; t < t_len; ++t) {
    int emitted = 0;
    while (emitted < max_symbols_per_frame) {
      ag::Tensor b = m.joint_pred.apply(g, g.reshape(pred, {1, m.config.decoder_hidden}));
      ag::Tensor at = g.slice(a, 0, t, t + 1);
      ag::Tensor z = m.joint_out.apply(g, g.tanh(g.add(at, b)));
      const auto& zd = z.data();
      int best = 0;
      for (int v = 1; v < vocab; ++v) {
        if (zd[size_t(v)] > zd[size_t(best)]) best = v;
      }
      (void)joint;
      if (best == 0) break;  // blank advances time
      out.push_back(best);
      pred = step_predictor(best);
      ++emitted;
    }
  }
  return out;
}

}  // namespace enhasr::rnnt

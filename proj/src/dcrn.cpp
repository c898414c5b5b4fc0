// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "enhasr/dcrn.hpp"

#include <cmath>

#include "enhasr/errors.hpp"

namespace enhasr::dcrn {

namespace {

// Smallest total frequency padding P with floor((f_in + P - k)/stride)+1 == f_out.
int solve_freq_padding(int f_in, int f_out, int k, int stride) {
  const int p = stride * (f_out - 1) + k - f_in;
  for (int total = std::max(0, p); total <= p + stride - 1; ++total) {
    if (total < 0 || total > 2 * k) continue;
    if ((f_in + total - k) / stride + 1 == f_out && f_in + total >= k) return total;
  }
  throw std::invalid_argument("dcrn: freq step " + std::to_string(f_in) + " -> " +
                              std::to_string(f_out) +
                              " is not reachable with stride-2 convolutions (chain must roughly "
                              "halve per stage)");
}

ag::ConvSpec conv_spec(int f_in, int f_out, std::pair<int, int> kernel, int stride_f) {
  ag::ConvSpec sp;
  sp.stride_t = 1;
  sp.stride_f = stride_f;
  sp.pad_t_lo = (kernel.first - 1) / 2;
  sp.pad_t_hi = kernel.first - 1 - sp.pad_t_lo;
  const int total = solve_freq_padding(f_in, f_out, kernel.second, stride_f);
  sp.pad_f_lo = total / 2;
  sp.pad_f_hi = total - total / 2;
  return sp;
}

ConvLayer make_conv(int c_in, int c_out, std::pair<int, int> kernel, const ag::ConvSpec& sp,
                    Rng& rng) {
  ConvLayer l;
  l.w = ag::init_uniform({c_out, c_in, kernel.first, kernel.second},
                         c_in * kernel.first * kernel.second, rng);
  l.b = ag::init_uniform({c_out}, c_in * kernel.first * kernel.second, rng);
  l.spec = sp;
  return l;
}

DenseBlock make_dense_block(int channels, int depth, std::pair<int, int> kernel, Rng& rng) {
  DenseBlock b;
  ag::ConvSpec sp;
  sp.pad_t_lo = (kernel.first - 1) / 2;
  sp.pad_t_hi = kernel.first - 1 - sp.pad_t_lo;
  sp.pad_f_lo = (kernel.second - 1) / 2;
  sp.pad_f_hi = kernel.second - 1 - sp.pad_f_lo;
  for (int k = 1; k <= depth; ++k) {
    b.layers.push_back(make_conv(k * channels, channels, kernel, sp, rng));
  }
  return b;
}

// [C,T,F] -> [T, C*F]
ag::Tensor to_frames(ag::Graph& g, const ag::Tensor& x) {
  const int c = x.dim(0), t = x.dim(1), f = x.dim(2);
  std::vector<double> out(size_t(x.size()), 0.0);
  const double* px = x.data().data();
  for (int ci = 0; ci < c; ++ci) {
    for (int ti = 0; ti < t; ++ti) {
      std::copy(px + (size_t(ci) * t + ti) * f, px + (size_t(ci) * t + ti + 1) * f,
                out.begin() + size_t(ti) * (size_t(c) * f) + size_t(ci) * f);
    }
  }
  ag::Tensor y = ag::Tensor::from({t, c * f}, std::move(out));
  if (g.recording() && g.tracked(x)) {
    g.add_node({x}, {y}, [&g, x, y, c, t, f]() {
      const double* grad = g.out_grad(y);
      if (!grad) return;
      auto& gx = g.grad_buf(x);
      for (int ci = 0; ci < c; ++ci) {
        for (int ti = 0; ti < t; ++ti) {
          const double* src = grad + size_t(ti) * (size_t(c) * f) + size_t(ci) * f;
          double* dst = gx.data() + (size_t(ci) * t + ti) * f;
          for (int fi = 0; fi < f; ++fi) dst[fi] += src[fi];
        }
      }
    });
  }
  return y;
}

// [T, C*F] -> [C,T,F]
ag::Tensor to_planes(ag::Graph& g, const ag::Tensor& x, int c, int f) {
  const int t = x.dim(0);
  std::vector<double> out(size_t(x.size()), 0.0);
  const double* px = x.data().data();
  for (int ci = 0; ci < c; ++ci) {
    for (int ti = 0; ti < t; ++ti) {
      std::copy(px + size_t(ti) * (size_t(c) * f) + size_t(ci) * f,
                px + size_t(ti) * (size_t(c) * f) + size_t(ci) * f + f,
                out.begin() + (size_t(ci) * t + ti) * f);
    }
  }
  ag::Tensor y = ag::Tensor::from({c, t, f}, std::move(out));
  if (g.recording() && g.tracked(x)) {
    g.add_node({x}, {y}, [&g, x, y, c, t, f]() {
      const double* grad = g.out_grad(y);
      if (!grad) return;
      auto& gx = g.grad_buf(x);
      for (int ci = 0; ci < c; ++ci) {
        for (int ti = 0; ti < t; ++ti) {
          const double* src = grad + (size_t(ci) * t + ti) * f;
          double* dst = gx.data() + size_t(ti) * (size_t(c) * f) + size_t(ci) * f;
          for (int fi = 0; fi < f; ++fi) dst[fi] += src[fi];
        }
      }
    });
  }
  return y;
}

}  // namespace

DcrnConfig DcrnConfig::paper() {
  DcrnConfig c;
  c.layer_specs = {{2, 257}, {32, 128}, {32, 64}, {32, 32}, {32, 16}, {64, 8},
                   {128, 4},  {256, 2},  {512, 1}, {256, 2}, {128, 4}, {64, 8},
                   {32, 16},  {32, 32},  {32, 64}, {32, 128}, {2, 257}};
  return c;
}

DcrnConfig DcrnConfig::toy() {
  DcrnConfig c;
  c.layer_specs = {{2, 33}, {8, 16}, {16, 8}, {32, 4}, {64, 2}, {128, 1},
                   {64, 2}, {32, 4}, {16, 8}, {8, 16}, {2, 33}};
  c.blstm_state = 32;
  c.dense_depth = 2;
  c.stft = dsp::StftConfig::toy();
  return c;
}

DcrnConfig DcrnConfig::tiny() {
  DcrnConfig c;
  c.layer_specs = {{2, 33}, {8, 16}, {16, 8}, {24, 4}, {32, 2},
                   {24, 4}, {16, 8}, {8, 16}, {2, 33}};
  c.blstm_state = 24;
  c.dense_depth = 1;
  c.stft = dsp::StftConfig::toy();
  return c;
}

void validate(const DcrnConfig& cfg) {
  const auto& specs = cfg.layer_specs;
  if (specs.size() < 5 || specs.size() % 2 == 0) {
    throw std::invalid_argument("dcrn: chain must be input + N encoder + N decoder stages");
  }
  const size_t n = specs.size();
  for (size_t i = 0; i < n; ++i) {
    if (specs[i].channels <= 0 || specs[i].freq <= 0) {
      throw std::invalid_argument("dcrn: non-positive stage spec");
    }
    if (specs[i].freq != specs[n - 1 - i].freq) {
      throw std::invalid_argument("dcrn: encoder/decoder stages are not mirror-symmetric in freq");
    }
  }
  if (specs.front().channels != 2 || specs.back().channels != 2) {
    throw std::invalid_argument("dcrn: chain must start and end with 2 channels (real, imag)");
  }
  if (cfg.stft.bins() != specs.front().freq) {
    throw std::invalid_argument("dcrn: stft bins " + std::to_string(cfg.stft.bins()) +
                                " do not match chain input freq " +
                                std::to_string(specs.front().freq));
  }
  const int e = cfg.encoder_stages();
  for (int i = 1; i <= e; ++i) {
    const auto kernel = (i == 1) ? cfg.kernel_boundary : cfg.kernel_interior;
    solve_freq_padding(specs[size_t(i - 1)].freq, specs[size_t(i)].freq, kernel.second, 2);
  }
  for (int j = 1; j <= e; ++j) {
    const int f_in = specs[size_t(e + j - 1)].freq;
    const int f_target = specs[size_t(e + j)].freq;
    const int f_conv = (f_target + 1) / 2;
    const auto kernel = (j == e) ? cfg.kernel_boundary : cfg.kernel_interior;
    solve_freq_padding(f_in, f_conv, kernel.second, 1);
    if (2 * f_conv - f_target > 1) {
      throw std::invalid_argument("dcrn: decoder stage cannot reach " + std::to_string(f_target) +
                                  " bins by x2 sub-pixel upsampling");
    }
  }
  if (cfg.dense_depth < 1 || cfg.blstm_state < 1) {
    throw std::invalid_argument("dcrn: dense_depth and blstm_state must be positive");
  }
}

EnhancementModel build_dcrn(const DcrnConfig& cfg, uint64_t seed) {
  validate(cfg);
  Rng rng(Rng::derive({seed, 0x4443524e}));
  EnhancementModel m;
  m.config = cfg;
  const auto& specs = cfg.layer_specs;
  const int e = cfg.encoder_stages();

  for (int i = 1; i <= e; ++i) {
    const auto kernel = (i == 1) ? cfg.kernel_boundary : cfg.kernel_interior;
    EncoderStage st;
    st.out = specs[size_t(i)];
    st.conv = make_conv(specs[size_t(i - 1)].channels, st.out.channels, kernel,
                        conv_spec(specs[size_t(i - 1)].freq, st.out.freq, kernel, 2), rng);
    if (i > e - cfg.dense_stages) {
      st.dense = make_dense_block(st.out.channels, cfg.dense_depth, cfg.kernel_interior, rng);
    }
    m.encoder.push_back(std::move(st));
  }

  const StageSpec bottleneck = specs[size_t(e)];
  const int flat = bottleneck.channels * bottleneck.freq;
  m.blstm1 = nn::make_blstm(flat, cfg.blstm_state, rng);
  m.blstm2 = nn::make_blstm(2 * cfg.blstm_state, cfg.blstm_state, rng);
  m.proj = nn::make_linear(2 * cfg.blstm_state, flat, rng);

  for (int j = 1; j <= e; ++j) {
    const bool last = (j == e);
    const auto kernel = last ? cfg.kernel_boundary : cfg.kernel_interior;
    DecoderStage st;
    st.out = specs[size_t(e + j)];
    st.final_stage = last;
    const int c_in = specs[size_t(e + j - 1)].channels + specs[size_t(e - j + 1)].channels;
    const int f_in = specs[size_t(e + j - 1)].freq;
    const int f_conv = (st.out.freq + 1) / 2;
    st.crop = 2 * f_conv - st.out.freq;
    st.conv = make_conv(c_in, 2 * st.out.channels, kernel, conv_spec(f_in, f_conv, kernel, 1), rng);
    if (!last && j <= cfg.dense_stages) {
      st.dense = make_dense_block(st.out.channels, cfg.dense_depth, cfg.kernel_interior, rng);
    }
    m.decoder.push_back(std::move(st));
  }
  return m;
}

ag::NamedTensors EnhancementModel::named_parameters() const {
  ag::NamedTensors out;
  auto add_conv = [&out](const std::string& prefix, const ConvLayer& c) {
    out.emplace_back(prefix + ".w", c.w);
    out.emplace_back(prefix + ".b", c.b);
  };
  auto add_block = [&](const std::string& prefix, const DenseBlock& b) {
    for (size_t k = 0; k < b.layers.size(); ++k) {
      add_conv(prefix + ".dense" + std::to_string(k), b.layers[k]);
    }
  };
  for (size_t i = 0; i < encoder.size(); ++i) {
    const std::string p = "enc" + std::to_string(i);
    add_conv(p + ".conv", encoder[i].conv);
    if (encoder[i].dense) add_block(p, *encoder[i].dense);
  }
  nn::collect(out, "blstm1", blstm1);
  nn::collect(out, "blstm2", blstm2);
  nn::collect(out, "proj", proj);
  for (size_t j = 0; j < decoder.size(); ++j) {
    const std::string p = "dec" + std::to_string(j);
    add_conv(p + ".conv", decoder[j].conv);
    if (decoder[j].dense) add_block(p, *decoder[j].dense);
  }
  return out;
}

int64_t EnhancementModel::param_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.size();
  return n;
}

EnhancementModel clone(const EnhancementModel& m) {
  EnhancementModel out = build_dcrn(m.config, 1);
  ag::copy_parameters(out.named_parameters(), m.named_parameters());
  return out;
}

ag::Tensor dense_block_forward(ag::Graph& g, const DenseBlock& block, const ag::Tensor& x) {
  const int c = x.dim(0);
  std::vector<ag::Tensor> feats{x};
  ag::Tensor out = x;
  for (const ConvLayer& layer : block.layers) {
    const int expect = int(feats.size()) * c;
    if (layer.w.dim(1) != expect) {
      throw std::invalid_argument("dense_block: layer expects " + std::to_string(layer.w.dim(1)) +
                                  " channels, got " + std::to_string(expect));
    }
    ag::Tensor in = feats.size() == 1 ? feats[0] : g.concat(feats, 0);
    out = g.elu(g.conv2d(in, layer.w, layer.b, layer.spec));
    feats.push_back(out);
  }
  return out;
}

ag::Tensor dcrn_forward(ag::Graph& g, const EnhancementModel& m, const ag::Tensor& x,
                        std::vector<StageTrace>* trace) {
  if (x.ndim() != 3 || x.dim(0) != 2 || x.dim(2) != m.config.input_bins()) {
    throw std::invalid_argument("dcrn_forward: expects [2,T," +
                                std::to_string(m.config.input_bins()) + "], got " +
                                ag::shape_str(x.shape()));
  }
  auto record = [trace](const std::string& name, const ag::Tensor& t) {
    if (trace) trace->push_back({name, t.dim(0), t.dim(1), t.dim(2)});
  };
  record("input", x);

  std::vector<ag::Tensor> skips;
  ag::Tensor h = x;
  for (size_t i = 0; i < m.encoder.size(); ++i) {
    const EncoderStage& st = m.encoder[i];
    h = g.elu(g.conv2d(h, st.conv.w, st.conv.b, st.conv.spec));
    if (st.dense) h = dense_block_forward(g, *st.dense, h);
    skips.push_back(h);
    record("enc" + std::to_string(i + 1), h);
  }

  const StageSpec bottleneck = m.config.layer_specs[size_t(m.config.encoder_stages())];
  ag::Tensor seq = to_frames(g, h);  // [T, C*F]
  seq = nn::blstm(g, seq, m.blstm1);
  seq = nn::blstm(g, seq, m.blstm2);
  seq = m.proj.apply(g, seq);
  h = to_planes(g, seq, bottleneck.channels, bottleneck.freq);
  record("blstm", h);

  const int e = m.config.encoder_stages();
  for (size_t j = 0; j < m.decoder.size(); ++j) {
    const DecoderStage& st = m.decoder[j];
    const ag::Tensor& skip = skips[size_t(e - 1 - int(j))];
    h = g.concat({h, skip}, 0);
    h = g.conv2d(h, st.conv.w, st.conv.b, st.conv.spec);
    if (!st.final_stage) h = g.elu(h);
    h = g.pixel_shuffle_freq(h);
    if (st.crop > 0) h = g.slice(h, 2, 0, st.out.freq);
    if (st.dense) h = dense_block_forward(g, *st.dense, h);
    record(st.final_stage ? "output" : "dec" + std::to_string(j + 1), h);
  }
  return h;
}

dsp::ComplexSpectrogram dcrn_forward(const EnhancementModel& m, const dsp::ComplexSpectrogram& x) {
  ag::Graph g(false);
  return dsp::tensor_to_spec(dcrn_forward(g, m, dsp::to_tensor(x)));
}

static int padded_length(const EnhancementModel& m, int len) {
  const int frame = m.config.stft.frame_samples();
  const int shift = m.config.stft.shift_samples();
  if (len <= frame) return frame;
  const int hops = (len - frame + shift - 1) / shift;
  return frame + hops * shift;
}

dsp::Waveform enhance(const EnhancementModel& m, const dsp::Waveform& x) {
  ag::Graph g(false);
  ag::Tensor out = g_enhance(g, m, dsp::to_tensor(x));
  dsp::Waveform w = dsp::tensor_to_wave(out);
  w.sample_rate = x.sample_rate;
  return w;
}

ag::Tensor g_enhance(ag::Graph& g, const EnhancementModel& m, const ag::Tensor& wave) {
  const int len = wave.dim(0);
  const int padded = padded_length(m, len);
  ag::Tensor w = wave;
  if (padded > len) w = g.pad(w, {{0, padded - len}});
  ag::Tensor spec = dsp::g_stft(g, w, m.config.stft);
  ag::Tensor est = dcrn_forward(g, m, spec);
  return dsp::g_istft(g, est, m.config.stft, len);
}

double enhancement_loss(const dsp::ComplexSpectrogram& est, const dsp::ComplexSpectrogram& ref) {
  ag::Graph g(false);
  return g_enhancement_loss(g, dsp::to_tensor(est), dsp::to_tensor(ref)).item();
}

ag::Tensor g_enhancement_loss(ag::Graph& g, const ag::Tensor& est, const ag::Tensor& ref) {
  if (est.shape() != ref.shape()) {
    throw std::invalid_argument("enhancement_loss: shape mismatch " + ag::shape_str(est.shape()) +
                                " vs " + ag::shape_str(ref.shape()));
  }
  return g.mean(g.abs(g.sub(est, ref)));
}

std::vector<StageSpec> stage_chain(const DcrnConfig& cfg) {
  validate(cfg);
  return cfg.layer_specs;
}

}  // namespace enhasr::dcrn

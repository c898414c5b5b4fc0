// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "enhasr/dcrn.hpp"

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"

using namespace enhasr;
using ag::Graph;
using ag::Tensor;
using testutil::random_tensor;

TEST_SUITE_BEGIN("dcrn");

namespace {

// the published (channels, freq) chain
const std::vector<dcrn::StageSpec> kPaperChain = {
    {2, 257}, {32, 128}, {32, 64}, {32, 32}, {32, 16}, {64, 8},   {128, 4}, {256, 2}, {512, 1},
    {256, 2}, {128, 4},  {64, 8},  {32, 16}, {32, 32}, {32, 64}, {32, 128}, {2, 257}};

dcrn::DcrnConfig micro_config() {
  // smallest chain that still exercises dense blocks, the bottleneck and crops
  dcrn::DcrnConfig cfg;
  cfg.layer_specs = {{2, 9}, {3, 4}, {4, 2}, {3, 4}, {2, 9}};
  cfg.blstm_state = 3;
  cfg.dense_depth = 2;
  cfg.dense_stages = 1;
  cfg.stft = dsp::StftConfig{1.0, 0.5, 16, dsp::WindowKind::SqrtHann};
  return cfg;
}

}  // namespace

TEST_CASE("config validation rejects broken chains") {
  auto cfg = dcrn::DcrnConfig::toy();
  cfg.layer_specs[2].freq = 9;  // breaks both symmetry and halving
  CHECK_THROWS_AS(dcrn::validate(cfg), std::invalid_argument);

  auto cfg2 = dcrn::DcrnConfig::toy();
  cfg2.layer_specs[1].freq = 5;  // 33 -> 5 is not a stride-2 step
  cfg2.layer_specs[cfg2.layer_specs.size() - 2].freq = 5;
  CHECK_THROWS_AS(dcrn::validate(cfg2), std::invalid_argument);

  CHECK_NOTHROW(dcrn::validate(dcrn::DcrnConfig::paper()));
  CHECK_NOTHROW(dcrn::validate(dcrn::DcrnConfig::toy()));
  CHECK_NOTHROW(dcrn::validate(dcrn::DcrnConfig::tiny()));
}

TEST_CASE("paper preset reproduces the published 17-stage chain") {
  CHECK(dcrn::stage_chain(dcrn::DcrnConfig::paper()) == kPaperChain);

  // build it and verify by introspecting live activation shapes at T=1
  auto m = dcrn::build_dcrn(dcrn::DcrnConfig::paper(), 1);
  Graph g(false);
  std::vector<dcrn::StageTrace> trace;
  Tensor x = Tensor::zeros({2, 1, 257});
  Tensor y = dcrn::dcrn_forward(g, m, x, &trace);
  CHECK(y.shape() == std::vector<int>{2, 1, 257});

  std::vector<dcrn::StageSpec> observed;
  for (const auto& st : trace) {
    if (st.name == "blstm") continue;
    observed.push_back({st.channels, st.freq});
  }
  CHECK(observed == kPaperChain);
}

TEST_CASE("toy preset maps (2,33) to (2,33) through the documented chain") {
  auto cfg = dcrn::DcrnConfig::toy();
  auto m = dcrn::build_dcrn(cfg, 2);
  Rng rng(3);
  Graph g(false);
  std::vector<dcrn::StageTrace> trace;
  Tensor y = dcrn::dcrn_forward(g, m, random_tensor({2, 4, 33}, rng), &trace);
  CHECK(y.shape() == std::vector<int>{2, 4, 33});
  std::vector<dcrn::StageSpec> observed;
  for (const auto& st : trace) {
    if (st.name == "blstm") continue;
    observed.push_back({st.channels, st.freq});
  }
  CHECK(observed == cfg.layer_specs);
}

TEST_CASE("parameter count is a pure function of the config") {
  auto cfg = dcrn::DcrnConfig::toy();
  auto a = dcrn::build_dcrn(cfg, 1);
  auto b = dcrn::build_dcrn(cfg, 999);
  CHECK(a.param_count() == b.param_count());
  CHECK(a.param_count() > 0);
}

TEST_CASE("dense block channel arithmetic matches the concatenation rule") {
  Rng rng(4);
  // C=4, depth 5: per-layer input channels 4,8,12,16,20, output 4
  dcrn::DenseBlock block;
  {
    auto cfg = dcrn::DcrnConfig::toy();
    cfg.dense_depth = 5;
    auto model_cfg = cfg;
    (void)model_cfg;
  }
  // build directly through a model config with C=4 at some stage is clumsy;
  // instead verify through the public forward on a hand-built block
  dcrn::DcrnConfig cfg;
  cfg.layer_specs = {{2, 9}, {4, 4}, {4, 2}, {4, 4}, {2, 9}};
  cfg.blstm_state = 2;
  cfg.dense_depth = 5;
  cfg.dense_stages = 2;
  cfg.stft = dsp::StftConfig{1.0, 0.5, 16, dsp::WindowKind::SqrtHann};
  auto m = dcrn::build_dcrn(cfg, 5);
  REQUIRE(m.encoder[0].dense.has_value());
  const auto& layers = m.encoder[0].dense->layers;
  REQUIRE(layers.size() == 5);
  const int c = 4;
  for (int k = 0; k < 5; ++k) {
    CHECK(layers[size_t(k)].w.dim(1) == (k + 1) * c);  // input channels
    CHECK(layers[size_t(k)].w.dim(0) == c);            // output channels
  }
  Graph g(false);
  Tensor x = random_tensor({4, 3, 5}, rng);
  Tensor y = dcrn::dense_block_forward(g, *m.encoder[0].dense, x);
  CHECK(y.shape() == x.shape());
}

TEST_CASE("dense block forward matches a literal step-by-step oracle") {
  Rng rng(6);
  dcrn::DcrnConfig cfg;
  cfg.layer_specs = {{2, 9}, {2, 4}, {4, 2}, {2, 4}, {2, 9}};
  cfg.blstm_state = 2;
  cfg.dense_depth = 3;
  cfg.dense_stages = 2;
  cfg.stft = dsp::StftConfig{1.0, 0.5, 16, dsp::WindowKind::SqrtHann};
  auto m = dcrn::build_dcrn(cfg, 7);
  const auto& block = *m.encoder[0].dense;  // C=2 block

  Tensor x = random_tensor({2, 3, 4}, rng);
  Graph g(false);
  Tensor y = dcrn::dense_block_forward(g, block, x);

  // oracle: unroll the concatenation by hand with separate graph calls
  Graph go(false);
  std::vector<Tensor> feats = {x};
  Tensor cur = x;
  for (const auto& layer : block.layers) {
    Tensor in = feats.size() == 1 ? feats[0] : go.concat(feats, 0);
    cur = go.elu(go.conv2d(in, layer.w, layer.b, layer.spec));
    feats.push_back(cur);
  }
  CHECK(y.data() == cur.data());
}

TEST_CASE("zero-weight dense block layers collapse to the bias") {
  dcrn::DcrnConfig cfg;
  cfg.layer_specs = {{2, 9}, {2, 4}, {4, 2}, {2, 4}, {2, 9}};
  cfg.blstm_state = 2;
  cfg.dense_depth = 1;
  cfg.dense_stages = 2;
  cfg.stft = dsp::StftConfig{1.0, 0.5, 16, dsp::WindowKind::SqrtHann};
  auto m = dcrn::build_dcrn(cfg, 8);
  auto& block = *m.encoder[0].dense;
  std::fill(block.layers[0].w.mutable_data().begin(), block.layers[0].w.mutable_data().end(), 0.0);
  block.layers[0].b.mutable_data() = {0.25, -0.5};
  Rng rng(9);
  Graph g(false);
  Tensor y = dcrn::dense_block_forward(g, block, random_tensor({2, 2, 3}, rng));
  for (int ti = 0; ti < 2; ++ti) {
    for (int fi = 0; fi < 3; ++fi) {
      CHECK(y.data()[size_t(0) * 6 + size_t(ti) * 3 + fi] ==
            doctest::Approx(0.25).epsilon(1e-12));  // elu(0.25) = 0.25
      CHECK(y.data()[size_t(1) * 6 + size_t(ti) * 3 + fi] ==
            doctest::Approx(std::expm1(-0.5)).epsilon(1e-9));  // elu(-0.5)
    }
  }
}

TEST_CASE("sub-pixel upsample interleaves channel pairs into adjacent bins") {
  Graph g;
  // x of shape (2,1,2) with channels [[a,b],[c,d]] -> (1,1,4) = [a,c,b,d]
  Tensor x = Tensor::from({2, 1, 2}, {1.0, 2.0, 3.0, 4.0});  // a=1,b=2,c=3,d=4
  Tensor y = g.pixel_shuffle_freq(x);
  CHECK(y.shape() == std::vector<int>{1, 1, 4});
  CHECK(y.data() == std::vector<double>{1.0, 3.0, 2.0, 4.0});
}

TEST_CASE("skip concatenation doubles the channels entering every decoder conv") {
  for (const auto& cfg : {dcrn::DcrnConfig::paper(), dcrn::DcrnConfig::toy(), dcrn::DcrnConfig::tiny()}) {
    auto m = dcrn::build_dcrn(cfg, 10);
    const int e = cfg.encoder_stages();
    for (int j = 0; j < e; ++j) {
      const int in_ch = m.decoder[size_t(j)].conv.w.dim(1);
      const int prev_ch = cfg.layer_specs[size_t(e + j)].channels;
      CHECK(in_ch == 2 * prev_ch);
    }
  }
}

TEST_CASE("dcrn_forward validates the bin count and preserves T,F") {
  auto m = dcrn::build_dcrn(micro_config(), 11);
  Rng rng(12);
  Graph g(false);
  Tensor y = dcrn::dcrn_forward(g, m, random_tensor({2, 5, 9}, rng));
  CHECK(y.shape() == std::vector<int>{2, 5, 9});
  CHECK_THROWS_AS(dcrn::dcrn_forward(g, m, random_tensor({2, 5, 8}, rng)), std::invalid_argument);
}

TEST_CASE("all-zero parameters with an output bias give a constant output") {
  auto m = dcrn::build_dcrn(micro_config(), 13);
  for (auto& [name, t] : m.named_parameters()) {
    std::fill(const_cast<Tensor&>(t).mutable_data().begin(),
              const_cast<Tensor&>(t).mutable_data().end(), 0.0);
  }
  // final decoder conv bias: channels are pre-shuffle (2*C_out = 4)
  auto& final_conv = m.decoder.back().conv;
  final_conv.b.mutable_data() = {0.5, 0.5, 0.5, 0.5};
  Rng rng(14);
  Graph g(false);
  Tensor y = dcrn::dcrn_forward(g, m, random_tensor({2, 3, 9}, rng));
  for (double v : y.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("batched processing equals per-utterance processing bit for bit") {
  auto m = dcrn::build_dcrn(micro_config(), 15);
  Rng rng(16);
  std::vector<Tensor> utts = {random_tensor({2, 4, 9}, rng), random_tensor({2, 6, 9}, rng),
                              random_tensor({2, 3, 9}, rng)};
  // "batch" route: same model applied in a loop within one graph
  Graph gb(false);
  std::vector<std::vector<double>> batched;
  for (const auto& u : utts) batched.push_back(dcrn::dcrn_forward(gb, m, u).data());
  // individual route: fresh graph per utterance
  for (size_t i = 0; i < utts.size(); ++i) {
    Graph gi(false);
    CHECK(dcrn::dcrn_forward(gi, m, utts[i]).data() == batched[i]);
  }
}

TEST_CASE("micro config gradient check across all parameters") {
  auto m = dcrn::build_dcrn(micro_config(), 17);
  Rng rng(18);
  Tensor x = random_tensor({2, 3, 9}, rng);
  const double err = ag::grad_check_params(
      [&](Graph& g) { return g.sum(dcrn::dcrn_forward(g, m, x)); }, m.named_parameters(), 1e-5,
      3, 19);
  CHECK(err < 1e-4);
}

TEST_CASE("enhance preserves the input length") {
  auto m = dcrn::build_dcrn(micro_config(), 20);
  Rng rng(21);
  for (int len : {16, 23, 100, 257}) {
    dsp::Waveform w;
    w.samples.resize(size_t(len));
    for (double& v : w.samples) v = rng.uniform(-0.5, 0.5);
    CHECK(dcrn::enhance(m, w).length() == len);
  }
}

TEST_CASE("enhancement_loss is the mean absolute error over both planes") {
  Rng rng(22);
  dsp::ComplexSpectrogram s;
  s.frames = 3;
  s.bins = 4;
  s.re.resize(12);
  s.im.resize(12);
  for (double& v : s.re) v = rng.uniform(-1, 1);
  for (double& v : s.im) v = rng.uniform(-1, 1);

  CHECK(dcrn::enhancement_loss(s, s) == 0.0);

  dsp::ComplexSpectrogram shifted = s;
  for (double& v : shifted.re) v += 1.0;
  for (double& v : shifted.im) v += 1.0;
  CHECK(dcrn::enhancement_loss(shifted, s) == doctest::Approx(1.0).epsilon(1e-12));

  // random pair vs a direct elementwise oracle
  dsp::ComplexSpectrogram other = s;
  for (double& v : other.re) v = rng.uniform(-1, 1);
  for (double& v : other.im) v = rng.uniform(-1, 1);
  double acc = 0;
  for (int i = 0; i < 12; ++i) {
    acc += std::fabs(other.re[size_t(i)] - s.re[size_t(i)]);
    acc += std::fabs(other.im[size_t(i)] - s.im[size_t(i)]);
  }
  CHECK(dcrn::enhancement_loss(other, s) == doctest::Approx(acc / 24.0).epsilon(1e-12));

  dsp::ComplexSpectrogram wrong;
  wrong.frames = 2;
  wrong.bins = 4;
  wrong.re.resize(8);
  wrong.im.resize(8);
  CHECK_THROWS_AS(dcrn::enhancement_loss(wrong, s), std::invalid_argument);
}

TEST_CASE("identity-overfit toy enhancer reproduces its input") {
  // train a micro model so that S_hat ~= X on a fixed tone, then check
  // enhance() ~ identity on that tone (SI-SNR proxy: relative L2)
  auto cfg = micro_config();
  auto m = dcrn::build_dcrn(cfg, 23);
  Rng rng(24);
  dsp::Waveform w;
  w.samples.resize(400);
  for (int i = 0; i < 400; ++i) {
    w.samples[size_t(i)] = 0.4 * std::sin(2 * M_PI * 2000.0 * i / 16000.0) +
                           0.2 * std::sin(2 * M_PI * 5000.0 * i / 16000.0);
  }
  auto params = m.named_parameters();
  std::vector<std::vector<double>> mom(params.size()), vel(params.size());
  for (size_t p = 0; p < params.size(); ++p) {
    mom[p].assign(size_t(params[p].second.size()), 0.0);
    vel[p].assign(size_t(params[p].second.size()), 0.0);
  }
  auto spec = dsp::stft(w, cfg.stft);
  Tensor target = dsp::to_tensor(spec);
  double loss = 0;
  for (int step = 0; step < 1000; ++step) {
    Graph g;
    Tensor est = dcrn::dcrn_forward(g, m, target);
    Tensor l = g.mean(g.square(g.sub(est, target)));
    loss = l.item();
    g.backward(l);
    const double lr = 2e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1 - std::pow(b1, step + 1), bc2 = 1 - std::pow(b2, step + 1);
    for (size_t p = 0; p < params.size(); ++p) {
      auto grad = g.grad_or_zero(params[p].second);
      auto& x = const_cast<Tensor&>(params[p].second).mutable_data();
      for (size_t i = 0; i < x.size(); ++i) {
        mom[p][i] = b1 * mom[p][i] + (1 - b1) * grad[i];
        vel[p][i] = b2 * vel[p][i] + (1 - b2) * grad[i] * grad[i];
        x[i] -= lr * (mom[p][i] / bc1) / (std::sqrt(vel[p][i] / bc2) + eps);
      }
    }
  }
  CHECK(loss < 1e-4);
  (void)rng;
}

TEST_SUITE_END();

// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "enhasr/consistency.hpp"

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"

using namespace enhasr;
using ag::Graph;
using ag::Tensor;
using testutil::random_tensor;

TEST_SUITE_BEGIN("consistency");

namespace {

rnnt::PosteriorGrid grid_from_logits(Graph& g, Tensor logits, int u) {
  rnnt::PosteriorGrid grid;
  grid.frames = logits.dim(0);
  grid.labels = u;
  grid.vocab = logits.dim(2);
  grid.logits = logits;
  grid.log_probs = g.log_softmax(logits);
  return grid;
}

rnnt::RnntModel tiny_model(uint64_t seed = 3) {
  rnnt::RnntConfig cfg = rnnt::RnntConfig::desk(5);
  cfg.feat_dim = 8;
  cfg.encoder_hidden = 6;
  cfg.decoder_hidden = 5;
  cfg.joint_hidden = 6;
  cfg.embed_dim = 4;
  return rnnt::build_rnnt(cfg, seed);
}

dcrn::DcrnConfig micro_dcrn() {
  dcrn::DcrnConfig cfg;
  cfg.layer_specs = {{2, 9}, {3, 4}, {4, 2}, {3, 4}, {2, 9}};
  cfg.blstm_state = 3;
  cfg.dense_depth = 1;
  cfg.dense_stages = 1;
  cfg.stft = dsp::StftConfig{1.0, 0.5, 16, dsp::WindowKind::SqrtHann};
  return cfg;
}

dsp::Waveform tone(int n, double f, double amp, uint64_t seed = 0) {
  dsp::Waveform w;
  w.samples.resize(size_t(n));
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    w.samples[size_t(i)] = amp * std::sin(2 * M_PI * f * i / 16000.0) + 0.01 * rng.uniform(-1, 1);
  }
  return w;
}

}  // namespace

TEST_CASE("kl_consistency identities") {
  Rng rng(1);
  Graph g;
  Tensor la = random_tensor({3, 2, 4}, rng);
  Tensor lb = random_tensor({3, 2, 4}, rng);
  auto ga = grid_from_logits(g, la, 1);
  auto gb = grid_from_logits(g, lb, 1);

  // exact zero on identical grids
  CHECK(consistency::kl_consistency(ga, ga) == 0.0);
  // symmetry
  CHECK(consistency::kl_consistency(ga, gb) ==
        doctest::Approx(consistency::kl_consistency(gb, ga)).epsilon(1e-12));
  // shape mismatch
  Tensor lc = random_tensor({2, 2, 4}, rng);
  auto gc = grid_from_logits(g, lc, 1);
  CHECK_THROWS_AS(consistency::kl_consistency(ga, gc), std::invalid_argument);
}

TEST_CASE("kl_consistency is symmetric and non-negative over 1000 random pairs") {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const int t = 1 + rng.uniform_int(3);
    const int u1 = 1 + rng.uniform_int(3);
    const int v = 2 + rng.uniform_int(3);
    Graph g;
    auto ga = grid_from_logits(g, random_tensor({t, u1, v}, rng, -3, 3), u1 - 1);
    auto gb = grid_from_logits(g, random_tensor({t, u1, v}, rng, -3, 3), u1 - 1);
    const double ab = consistency::kl_consistency(ga, gb);
    CHECK(ab >= 0.0);
    CHECK(ab == doctest::Approx(consistency::kl_consistency(gb, ga)).epsilon(1e-12));
  }
}

TEST_CASE("kl_consistency matches a closed-form hand grid") {
  // every node: P_A = (0.5, 0.5), P_B = (0.9, 0.1)
  const double pa = 0.5, pb = 0.9;
  const double node_kl = (pa - pb) * std::log(pa / pb) + ((1 - pa) - (1 - pb)) * std::log((1 - pa) / (1 - pb));
  Graph g;
  const int t = 2, u1 = 2;
  std::vector<double> la(size_t(t) * u1 * 2), lb(size_t(t) * u1 * 2);
  for (int n = 0; n < t * u1; ++n) {
    la[size_t(n) * 2] = std::log(pa);
    la[size_t(n) * 2 + 1] = std::log(1 - pa);
    lb[size_t(n) * 2] = std::log(pb);
    lb[size_t(n) * 2 + 1] = std::log(1 - pb);
  }
  auto ga = grid_from_logits(g, Tensor::from({t, u1, 2}, la), u1 - 1);
  auto gb = grid_from_logits(g, Tensor::from({t, u1, 2}, lb), u1 - 1);
  // the 4-node average equals the per-node value
  CHECK(consistency::kl_consistency(ga, gb) == doctest::Approx(node_kl).epsilon(1e-12));
  // spot value: symmetric KL of (0.5,0.5) vs (0.9,0.1) = 0.4*ln9
  CHECK(node_kl == doctest::Approx(0.4 * std::log(9.0)).epsilon(1e-12));
}

TEST_CASE("kl gradient passes finite differences") {
  Rng rng(3);
  Tensor la = random_tensor({2, 2, 3}, rng);
  Tensor lb = random_tensor({2, 2, 3}, rng);
  const double err = ag::grad_check(
      [&](Graph& g, const Tensor& x) {
        auto ga = grid_from_logits(g, x, 1);
        auto gb = grid_from_logits(g, lb, 1);
        return consistency::g_kl_consistency(g, ga, gb);
      },
      la);
  CHECK(err < 1e-5);
}

TEST_CASE("make_variants satisfies its field invariants") {
  auto m = dcrn::build_dcrn(micro_dcrn(), 5);
  dsp::Waveform s = tone(480, 2000.0, 0.4, 7);
  dsp::Waveform n = tone(480, 700.0, 0.3, 8);

  auto vs = consistency::make_variants(s, n, 3.0, m);
  CHECK(vs.noise_snr_db == 3.0);
  CHECK(vs.s1.length() == s.length());
  CHECK(vs.s2.length() == s.length());
  CHECK(vs.s3.length() == s.length());
  CHECK(vs.s4.length() == s.length());
  // recompute each field independently
  CHECK(vs.s1.samples == s.samples);
  CHECK(vs.s2.samples == dsp::mix_at_snr(s, n, 3.0).mixed.samples);
  CHECK(vs.s3.samples == dcrn::enhance(m, vs.s1).samples);
  CHECK(vs.s4.samples == dcrn::enhance(m, vs.s2).samples);
}

TEST_CASE("very weak noise makes s2 approach s1") {
  auto m = dcrn::build_dcrn(micro_dcrn(), 6);
  dsp::Waveform s = tone(480, 1500.0, 0.4, 9);
  dsp::Waveform n = tone(480, 900.0, 0.3, 10);
  auto vs = consistency::make_variants(s, n, 100.0, m);
  double num = 0, den = 0;
  for (int i = 0; i < s.length(); ++i) {
    const double d = vs.s2.samples[size_t(i)] - s.samples[size_t(i)];
    num += d * d;
    den += s.samples[size_t(i)] * s.samples[size_t(i)];
  }
  CHECK(std::sqrt(num / den) < 1e-4);
}

TEST_CASE("sample_pair is reproducible, balanced and honors the restricted mode") {
  auto m = dcrn::build_dcrn(micro_dcrn(), 11);
  dsp::Waveform s = tone(480, 1200.0, 0.4, 12);
  dsp::Waveform n = tone(480, 500.0, 0.2, 13);
  auto vs = consistency::make_variants(s, n, 5.0, m);

  // deterministic pair sequence for a fixed seed
  auto draw_ids = [&](uint64_t seed, int count) {
    Rng rng(seed);
    std::vector<std::string> ids;
    for (int i = 0; i < count; ++i) ids.push_back(consistency::sample_pair(vs, rng).pair_id);
    return ids;
  };
  CHECK(draw_ids(42, 50) == draw_ids(42, 50));

  // 10,000 draws: each pair frequency within [0.47, 0.53]
  Rng rng(99);
  int s1s3 = 0;
  for (int i = 0; i < 10000; ++i) {
    auto p = consistency::sample_pair(vs, rng);
    if (p.pair_id == "s1s3") {
      ++s1s3;
      CHECK(p.a == &vs.s1);
      CHECK(p.b == &vs.s3);
    } else {
      CHECK(p.pair_id == "s2s4");
      CHECK(p.a == &vs.s2);
      CHECK(p.b == &vs.s4);
    }
  }
  CHECK(s1s3 >= 4700);
  CHECK(s1s3 <= 5300);

  // restricted mode always yields (s3, s4)
  for (int i = 0; i < 10; ++i) {
    auto p = consistency::sample_pair(vs, rng, consistency::PairPolicy::S3S4Only);
    CHECK(p.pair_id == "s3s4");
    CHECK(p.a == &vs.s3);
    CHECK(p.b == &vs.s4);
  }
}

TEST_CASE("combined_loss degenerates to rnnt_loss at lambda 0 on an identical pair") {
  auto m = tiny_model();
  Rng rng(20);
  Tensor f = random_tensor({8, 8}, rng);
  const std::vector<int> y = {1, 2};
  Graph g;
  auto cl = consistency::combined_loss(g, m, f, f, y, {0.0});
  CHECK(cl.kl == 0.0);
  Graph g2;
  auto grid = rnnt::posterior_grid(g2, m, f, y);
  const double plain = rnnt::rnnt_loss(g2, grid, y).item();
  CHECK(cl.total.item() == doctest::Approx(plain).epsilon(1e-12));
}

TEST_CASE("identical variants contribute exactly zero KL at any lambda") {
  auto m = tiny_model();
  Rng rng(21);
  Tensor f = random_tensor({8, 8}, rng);
  Graph g;
  auto cl = consistency::combined_loss(g, m, f, f, {1}, {3.7});
  CHECK(cl.kl == 0.0);
  CHECK(cl.total.item() == doctest::Approx(0.5 * cl.nll_i + 0.5 * cl.nll_j).epsilon(1e-12));
}

TEST_CASE("combined_loss recomposes from its separately computed pieces") {
  auto m = tiny_model();
  Rng rng(22);
  Tensor fi = random_tensor({8, 8}, rng);
  Tensor fj = random_tensor({8, 8}, rng);
  const std::vector<int> y = {1, 2, 3};
  Graph g;
  auto cl = consistency::combined_loss(g, m, fi, fj, y, {1.0});

  Graph gi;
  const double l1 = rnnt::rnnt_loss(gi, rnnt::posterior_grid(gi, m, fi, y), y).item();
  Graph gj;
  const double l3 = rnnt::rnnt_loss(gj, rnnt::posterior_grid(gj, m, fj, y), y).item();
  Graph gk;
  auto ga = rnnt::posterior_grid(gk, m, fi, y);
  auto gb = rnnt::posterior_grid(gk, m, fj, y);
  const double kl = consistency::kl_consistency(ga, gb);
  CHECK(cl.total.item() == doctest::Approx(0.5 * l1 + 0.5 * l3 + kl).epsilon(1e-10));
}

TEST_CASE("with lambda 0 the combined gradient is the mean of the branch gradients") {
  auto m = tiny_model(33);
  Rng rng(23);
  Tensor fi = random_tensor({8, 8}, rng);
  Tensor fj = random_tensor({8, 8}, rng);
  const std::vector<int> y = {2};

  Graph g;
  auto cl = consistency::combined_loss(g, m, fi, fj, y, {0.0});
  g.backward(cl.total);

  Graph gi;
  gi.backward(rnnt::rnnt_loss(gi, rnnt::posterior_grid(gi, m, fi, y), y));
  Graph gj;
  gj.backward(rnnt::rnnt_loss(gj, rnnt::posterior_grid(gj, m, fj, y), y));

  for (const auto& [name, t] : m.named_parameters()) {
    const auto gc = g.grad_or_zero(t);
    const auto g1 = gi.grad_or_zero(t);
    const auto g2 = gj.grad_or_zero(t);
    for (size_t i = 0; i < gc.size(); ++i) {
      CHECK(gc[i] == doctest::Approx(0.5 * g1[i] + 0.5 * g2[i]).epsilon(1e-10).scale(1.0));
    }
  }
}

TEST_CASE("combined_loss end-to-end gradient passes finite differences") {
  auto m = tiny_model(44);
  Rng rng(24);
  Tensor fi = random_tensor({8, 8}, rng);
  Tensor fj = random_tensor({8, 8}, rng);
  const std::vector<int> y = {1, 4};
  const double err = ag::grad_check_params(
      [&](Graph& g) { return consistency::combined_loss(g, m, fi, fj, y, {0.8}).total; },
      m.named_parameters(), 1e-5, 4, 25);
  CHECK(err < 1e-4);
}

TEST_SUITE_END();

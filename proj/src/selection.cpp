// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "enhasr/selection.hpp"

namespace enhasr::selection {

SelectionModel build_selection(int feat_dim, uint64_t seed) {
  Rng rng(Rng::derive({seed, 0x53454c43}));
  SelectionModel sm;
  sm.feat_dim = feat_dim;
  sm.input = nn::make_linear(2 * feat_dim, sm.hidden, rng);
  sm.blstm1 = nn::make_blstm(sm.hidden, sm.hidden, rng);
  sm.blstm2 = nn::make_blstm(2 * sm.hidden, sm.hidden, rng);
  sm.output = nn::make_linear(2 * sm.hidden, feat_dim, rng);
  return sm;
}

ag::NamedTensors SelectionModel::named_parameters() const {
  ag::NamedTensors out;
  nn::collect(out, "input", input);
  nn::collect(out, "blstm1", blstm1);
  nn::collect(out, "blstm2", blstm2);
  nn::collect(out, "output", output);
  return out;
}

SelectionModel clone(const SelectionModel& sm) {
  SelectionModel out = build_selection(sm.feat_dim, 1);
  ag::copy_parameters(out.named_parameters(), sm.named_parameters());
  return out;
}

ag::Tensor selection_forward(ag::Graph& g, const SelectionModel& sm, const ag::Tensor& a,
                             const ag::Tensor& a_hat) {
  if (a.shape() != a_hat.shape()) {
    throw std::invalid_argument("selection_forward: feature shape mismatch " +
                                ag::shape_str(a.shape()) + " vs " + ag::shape_str(a_hat.shape()));
  }
  ag::Tensor h = g.concat({a, a_hat}, 1);  // [T, 2F]
  h = sm.input.apply(g, h);
  h = nn::blstm(g, h, sm.blstm1);
  h = nn::blstm(g, h, sm.blstm2);
  return g.sigmoid(sm.output.apply(g, h));
}

ag::Tensor select_features(ag::Graph& g, const ag::Tensor& p, const ag::Tensor& a,
                           const ag::Tensor& a_hat) {
  if (p.shape() != a.shape() || a.shape() != a_hat.shape()) {
    throw std::invalid_argument("select_features: shape mismatch " + ag::shape_str(p.shape()) +
                                " / " + ag::shape_str(a.shape()) + " / " +
                                ag::shape_str(a_hat.shape()));
  }
  ag::Tensor one_minus_p = g.add_scalar(g.scale(p, -1.0), 1.0);
  return g.add(g.mul(p, a), g.mul(one_minus_p, a_hat));
}

dsp::FeatureMatrix selection_mask(const SelectionModel& sm, const dsp::FeatureMatrix& a,
                                  const dsp::FeatureMatrix& a_hat) {
  ag::Graph g(false);
  return dsp::tensor_to_features(selection_forward(g, sm, dsp::to_tensor(a), dsp::to_tensor(a_hat)));
}

dsp::FeatureMatrix select_features(const dsp::FeatureMatrix& p, const dsp::FeatureMatrix& a,
                                   const dsp::FeatureMatrix& a_hat) {
  ag::Graph g(false);
  return dsp::tensor_to_features(
      select_features(g, dsp::to_tensor(p), dsp::to_tensor(a), dsp::to_tensor(a_hat)));
}

}  // namespace enhasr::selection

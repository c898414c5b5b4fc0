// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "enhasr/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "enhasr/errors.hpp"

namespace enhasr::ag {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;

int64_t numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

[[noreturn]] void shape_error(const char* prim, const std::vector<int>& a,
                              const std::vector<int>& b) {
  throw std::invalid_argument(std::string(prim) + ": shape mismatch " + shape_str(a) + " vs " +
                              shape_str(b));
}

void check_positive_shape(const std::vector<int>& shape) {
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension in " + shape_str(shape));
  }
}

void axpy(std::vector<double>& dst, const double* g, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dst[size_t(i)] += g[i];
}

void axpy_region(std::vector<double>& dst, int64_t offset, const double* g, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dst[size_t(offset + i)] += g[i];
}

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return from(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  check_positive_shape(shape);
  Tensor t;
  t.impl_ = std::make_shared<TensorData>();
  t.impl_->shape = std::move(shape);
  t.impl_->data.assign(size_t(numel(t.impl_->shape)), value);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  check_positive_shape(shape);
  Tensor t;
  t.impl_ = std::make_shared<TensorData>();
  int64_t n = numel(shape);
  if (data.empty()) data.assign(size_t(n), 0.0);
  if (int64_t(data.size()) != n) {
    throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(size()) + " elements");
  return impl_->data[0];
}

bool Graph::any_tracked(const std::vector<Tensor>& ts) const {
  for (const Tensor& t : ts) {
    if (tracked(t)) return true;
  }
  return false;
}

bool Graph::tracked(const Tensor& t) const {
  if (!t.defined()) return false;
  return t.requires_grad() || active_.count(t.raw()) > 0;
}

void Graph::add_node(std::vector<Tensor> inputs, std::vector<Tensor> outputs,
                     std::function<void()> backward) {
  if (!record_) return;
  for (const Tensor& o : outputs) active_.insert(o.raw());
  nodes_.push_back(Node{std::move(inputs), std::move(outputs), std::move(backward)});
}

const double* Graph::out_grad(const Tensor& t) const {
  auto it = grads_.find(t.raw());
  return it == grads_.end() ? nullptr : it->second.data();
}

std::vector<double>& Graph::grad_buf(const Tensor& t) {
  auto& buf = grads_[t.raw()];
  if (buf.empty()) buf.assign(size_t(t.size()), 0.0);
  return buf;
}

void Graph::backward(const Tensor& loss) {
  if (!record_) throw std::invalid_argument("backward: graph was created with record=false");
  if (ran_backward_) throw std::invalid_argument("backward: already ran on this graph");
  if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
  ran_backward_ = true;
  grads_.clear();
  grad_buf(loss)[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    bool live = false;
    for (const Tensor& o : it->outputs) {
      if (grads_.count(o.raw())) {
        live = true;
        break;
      }
    }
    if (live) it->backward();
  }
}

bool Graph::has_grad(const Tensor& t) const { return grads_.count(t.raw()) > 0; }

const std::vector<double>& Graph::grad(const Tensor& t) const {
  auto it = grads_.find(t.raw());
  if (it == grads_.end()) throw std::invalid_argument("grad: no gradient flowed to this tensor");
  return it->second;
}

std::vector<double> Graph::grad_or_zero(const Tensor& t) const {
  auto it = grads_.find(t.raw());
  if (it == grads_.end()) return std::vector<double>(size_t(t.size()), 0.0);
  return it->second;
}

// ---------------------------------------------------------------------------
// elementwise

#define ENHASR_BINARY_OP(name, fwd_expr, backward_body)                               \
  Tensor Graph::name(const Tensor& a, const Tensor& b) {                             \
    if (a.shape() != b.shape()) shape_error(#name, a.shape(), b.shape());             \
    const int64_t n = a.size();                                                      \
    std::vector<double> out(size_t(n), 0.0);                                              \
    const double* pa = a.data().data();                                              \
    const double* pb = b.data().data();                                              \
    for (int64_t i = 0; i < n; ++i) out[size_t(i)] = (fwd_expr);                     \
    Tensor y = Tensor::from(a.shape(), std::move(out));                              \
    if (record_ && (tracked(a) || tracked(b))) {                                     \
      add_node({a, b}, {y}, [this, a, b, y]() backward_body);                        \
    }                                                                                \
    return y;                                                                        \
  }

ENHASR_BINARY_OP(add, pa[i] + pb[i], {
  const double* g = out_grad(y);
  if (!g) return;
  const int64_t n = y.size();
  if (tracked(a)) axpy(grad_buf(a), g, n);
  if (tracked(b)) axpy(grad_buf(b), g, n);
})

ENHASR_BINARY_OP(sub, pa[i] - pb[i], {
  const double* g = out_grad(y);
  if (!g) return;
  const int64_t n = y.size();
  if (tracked(a)) axpy(grad_buf(a), g, n);
  if (tracked(b)) {
    auto& gb = grad_buf(b);
    for (int64_t i = 0; i < n; ++i) gb[size_t(i)] -= g[i];
  }
})

ENHASR_BINARY_OP(mul, pa[i] * pb[i], {
  const double* g = out_grad(y);
  if (!g) return;
  const int64_t n = y.size();
  if (tracked(a)) {
    auto& ga = grad_buf(a);
    const double* pb2 = b.data().data();
    for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[i] * pb2[i];
  }
  if (tracked(b)) {
    auto& gb = grad_buf(b);
    const double* pa2 = a.data().data();
    for (int64_t i = 0; i < n; ++i) gb[size_t(i)] += g[i] * pa2[i];
  }
})

ENHASR_BINARY_OP(div, pa[i] / pb[i], {
  const double* g = out_grad(y);
  if (!g) return;
  const int64_t n = y.size();
  const double* pa2 = a.data().data();
  const double* pb2 = b.data().data();
  if (tracked(a)) {
    auto& ga = grad_buf(a);
    for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[i] / pb2[i];
  }
  if (tracked(b)) {
    auto& gb = grad_buf(b);
    for (int64_t i = 0; i < n; ++i) gb[size_t(i)] -= g[i] * pa2[i] / (pb2[i] * pb2[i]);
  }
})

#undef ENHASR_BINARY_OP

#define ENHASR_UNARY_OP(name, fwd_expr, bwd_expr)                                    \
  Tensor Graph::name(const Tensor& a) {                                             \
    const int64_t n = a.size();                                                     \
    std::vector<double> out(size_t(n), 0.0);                                             \
    const double* pa = a.data().data();                                             \
    for (int64_t i = 0; i < n; ++i) out[size_t(i)] = (fwd_expr);                    \
    Tensor y = Tensor::from(a.shape(), std::move(out));                             \
    if (record_ && tracked(a)) {                                                    \
      add_node({a}, {y}, [this, a, y]() {                                           \
        const double* g = out_grad(y);                                              \
        if (!g) return;                                                             \
        auto& ga = grad_buf(a);                                                     \
        const double* pa = a.data().data();                                         \
        const double* py = y.data().data();                                         \
        (void)pa;                                                                   \
        (void)py;                                                                   \
        const int64_t n = y.size();                                                 \
        for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[i] * (bwd_expr);         \
      });                                                                           \
    }                                                                               \
    return y;                                                                       \
  }

ENHASR_UNARY_OP(exp, std::exp(pa[i]), py[i])
ENHASR_UNARY_OP(log, std::log(pa[i]), 1.0 / pa[i])
ENHASR_UNARY_OP(sqrt, std::sqrt(pa[i]), 0.5 / py[i])
ENHASR_UNARY_OP(square, pa[i] * pa[i], 2.0 * pa[i])
ENHASR_UNARY_OP(abs, std::fabs(pa[i]), (pa[i] > 0 ? 1.0 : (pa[i] < 0 ? -1.0 : 0.0)))
ENHASR_UNARY_OP(sigmoid, 1.0 / (1.0 + std::exp(-pa[i])), py[i] * (1.0 - py[i]))
ENHASR_UNARY_OP(tanh, std::tanh(pa[i]), 1.0 - py[i] * py[i])
ENHASR_UNARY_OP(relu, pa[i] > 0 ? pa[i] : 0.0, pa[i] > 0 ? 1.0 : 0.0)
ENHASR_UNARY_OP(elu, pa[i] > 0 ? pa[i] : std::expm1(pa[i]), pa[i] > 0 ? 1.0 : py[i] + 1.0)

#undef ENHASR_UNARY_OP

Tensor Graph::add_scalar(const Tensor& a, double c) {
  const int64_t n = a.size();
  std::vector<double> out(size_t(n), 0.0);
  const double* pa = a.data().data();
  for (int64_t i = 0; i < n; ++i) out[size_t(i)] = pa[i] + c;
  Tensor y = Tensor::from(a.shape(), std::move(out));
  if (record_ && tracked(a)) {
    add_node({a}, {y}, [this, a, y]() {
      const double* g = out_grad(y);
      if (g) axpy(grad_buf(a), g, y.size());
    });
  }
  return y;
}

Tensor Graph::scale(const Tensor& a, double c) {
  const int64_t n = a.size();
  std::vector<double> out(size_t(n), 0.0);
  const double* pa = a.data().data();
  for (int64_t i = 0; i < n; ++i) out[size_t(i)] = pa[i] * c;
  Tensor y = Tensor::from(a.shape(), std::move(out));
  if (record_ && tracked(a)) {
    add_node({a}, {y}, [this, a, y, c]() {
      const double* g = out_grad(y);
      if (!g) return;
      auto& ga = grad_buf(a);
      const int64_t n = y.size();
      for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[i] * c;
    });
  }
  return y;
}

Tensor Graph::clamp_min(const Tensor& a, double lo) {
  const int64_t n = a.size();
  std::vector<double> out(size_t(n), 0.0);
  const double* pa = a.data().data();
  for (int64_t i = 0; i < n; ++i) out[size_t(i)] = pa[i] > lo ? pa[i] : lo;
  Tensor y = Tensor::from(a.shape(), std::move(out));
  if (record_ && tracked(a)) {
    add_node({a}, {y}, [this, a, y, lo]() {
      const double* g = out_grad(y);
      if (!g) return;
      auto& ga = grad_buf(a);
      const double* pa = a.data().data();
      const int64_t n = y.size();
      for (int64_t i = 0; i < n; ++i) {
        if (pa[i] > lo) ga[size_t(i)] += g[i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// shape ops

Tensor Graph::concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const auto& s0 = parts[0].shape();
  if (axis < 0 || axis >= int(s0.size())) throw std::invalid_argument("concat: bad axis");
  int cat = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != int(s0.size())) shape_error("concat", s0, p.shape());
    for (int d = 0; d < p.ndim(); ++d) {
      if (d != axis && p.dim(d) != s0[size_t(d)]) shape_error("concat", s0, p.shape());
    }
    cat += p.dim(axis);
  }
  std::vector<int> oshape = s0;
  oshape[size_t(axis)] = cat;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[size_t(d)];
  for (size_t d = size_t(axis) + 1; d < s0.size(); ++d) inner *= s0[d];

  std::vector<double> out(size_t(numel(oshape)));
  int64_t off = 0;
  for (const Tensor& p : parts) {
    const int64_t rows = int64_t(p.dim(axis)) * inner;
    const double* src = p.data().data();
    for (int64_t o = 0; o < outer; ++o) {
      std::memcpy(out.data() + o * (int64_t(cat) * inner) + off, src + o * rows,
                  size_t(rows) * sizeof(double));
    }
    off += rows;
  }
  Tensor y = Tensor::from(oshape, std::move(out));
  if (record_ && any_tracked(parts)) {
    add_node(parts, {y}, [this, parts, y, outer, inner, cat, axis]() {
      const double* g = out_grad(y);
      if (!g) return;
      int64_t off = 0;
      for (const Tensor& p : parts) {
        const int64_t rows = int64_t(p.dim(axis)) * inner;
        if (tracked(p)) {
          auto& gp = grad_buf(p);
          for (int64_t o = 0; o < outer; ++o) {
            axpy_region(gp, o * rows, g + o * (int64_t(cat) * inner) + off, rows);
          }
        }
        off += rows;
      }
    });
  }
  return y;
}

Tensor Graph::slice(const Tensor& a, int axis, int begin, int end) {
  const auto& s = a.shape();
  if (axis < 0 || axis >= int(s.size())) throw std::invalid_argument("slice: bad axis");
  if (begin < 0 || end > s[size_t(axis)] || begin >= end) {
    throw std::invalid_argument("slice: bad range [" + std::to_string(begin) + "," +
                                std::to_string(end) + ") on axis " + std::to_string(axis) +
                                " of " + shape_str(s));
  }
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[size_t(d)];
  for (size_t d = size_t(axis) + 1; d < s.size(); ++d) inner *= s[d];
  const int64_t in_rows = int64_t(s[size_t(axis)]) * inner;
  const int64_t out_rows = int64_t(end - begin) * inner;

  std::vector<int> oshape = s;
  oshape[size_t(axis)] = end - begin;
  std::vector<double> out(size_t(outer * out_rows));
  const double* src = a.data().data();
  for (int64_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * out_rows, src + o * in_rows + int64_t(begin) * inner,
                size_t(out_rows) * sizeof(double));
  }
  Tensor y = Tensor::from(oshape, std::move(out));
  if (record_ && tracked(a)) {
    add_node({a}, {y}, [this, a, y, outer, inner, in_rows, out_rows, begin]() {
      const double* g = out_grad(y);
      if (!g) return;
      auto& ga = grad_buf(a);
      for (int64_t o = 0; o < outer; ++o) {
        axpy_region(ga, o * in_rows + int64_t(begin) * inner, g + o * out_rows, out_rows);
      }
    });
  }
  return y;
}

Tensor Graph::reshape(const Tensor& a, std::vector<int> shape) {
  if (numel(shape) != a.size()) {
    shape_error("reshape", a.shape(), shape);
  }
  Tensor y = Tensor::from(std::move(shape), a.data());
  if (record_ && tracked(a)) {
    add_node({a}, {y}, [this, a, y]() {
      const double* g = out_grad(y);
      if (g) axpy(grad_buf(a), g, y.size());
    });
  }
  return y;
}

Tensor Graph::transpose(const Tensor& a) {
  if (a.ndim() != 2) throw std::invalid_argument("transpose: expects 2-D, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(size_t(a.size()));
  const double* pa = a.data().data();
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out[size_t(j) * m + i] = pa[size_t(i) * n + j];
  }
  Tensor y = Tensor::from({n, m}, std::move(out));
  if (record_ && tracked(a)) {
    add_node({a}, {y}, [this, a, y, m, n]() {
      const double* g = out_grad(y);
      if (!g) return;
      auto& ga = grad_buf(a);
      for (int j = 0; j < n; ++j) {
        for (int i = 0; i < m; ++i) ga[size_t(i) * n + j] += g[size_t(j) * m + i];
      }
    });
  }
  return y;
}

Tensor Graph::pad(const Tensor& a, const std::vector<std::pair<int, int>>& widths) {
  const auto& s = a.shape();
  if (widths.size() != s.size()) throw std::invalid_argument("pad: widths rank mismatch");
  std::vector<int> oshape(s.size());
  for (size_t d = 0; d < s.size(); ++d) {
    if (widths[d].first < 0 || widths[d].second < 0) throw std::invalid_argument("pad: negative width");
    oshape[d] = s[d] + widths[d].first + widths[d].second;
  }
  std::vector<double> out(size_t(numel(oshape)), 0.0);
  // iterate input positions; compute strides once
  std::vector<int64_t> istr(s.size(), 1), ostr(s.size(), 1);
  for (int d = int(s.size()) - 2; d >= 0; --d) {
    istr[size_t(d)] = istr[size_t(d) + 1] * s[size_t(d) + 1];
    ostr[size_t(d)] = ostr[size_t(d) + 1] * oshape[size_t(d) + 1];
  }
  const int64_t n = a.size();
  const double* pa = a.data().data();
  std::vector<int> idx(s.size(), 0);
  for (int64_t i = 0; i < n; ++i) {
    int64_t off = 0;
    for (size_t d = 0; d < s.size(); ++d) off += (idx[d] + widths[d].first) * ostr[d];
    out[size_t(off)] = pa[i];
    for (int d = int(s.size()) - 1; d >= 0; --d) {
      if (++idx[size_t(d)] < s[size_t(d)]) break;
      idx[size_t(d)] = 0;
    }
  }
  Tensor y = Tensor::from(oshape, std::move(out));
  if (record_ && tracked(a)) {
    add_node({a}, {y}, [this, a, y, widths, s, ostr]() {
      const double* g = out_grad(y);
      if (!g) return;
      auto& ga = grad_buf(a);
      std::vector<int> idx(s.size(), 0);
      const int64_t n = a.size();
      for (int64_t i = 0; i < n; ++i) {
        int64_t off = 0;
        for (size_t d = 0; d < s.size(); ++d) off += (idx[d] + widths[d].first) * ostr[d];
        ga[size_t(i)] += g[off];
        for (int d = int(s.size()) - 1; d >= 0; --d) {
          if (++idx[size_t(d)] < s[size_t(d)]) break;
          idx[size_t(d)] = 0;
        }
      }
    });
  }
  return y;
}

Tensor Graph::subsample_rows(const Tensor& a) {
  if (a.ndim() != 2) throw std::invalid_argument("subsample_rows: expects 2-D, got " + shape_str(a.shape()));
  const int t = a.dim(0), d = a.dim(1);
  const int to = (t + 1) / 2;
  std::vector<double> out(size_t(to) * d);
  const double* pa = a.data().data();
  for (int i = 0; i < to; ++i) {
    std::memcpy(out.data() + size_t(i) * d, pa + size_t(2 * i) * d, size_t(d) * sizeof(double));
  }
  Tensor y = Tensor::from({to, d}, std::move(out));
  if (record_ && tracked(a)) {
    add_node({a}, {y}, [this, a, y, to, d]() {
      const double* g = out_grad(y);
      if (!g) return;
      auto& ga = grad_buf(a);
      for (int i = 0; i < to; ++i) {
        axpy_region(ga, int64_t(2 * i) * d, g + int64_t(i) * d, d);
      }
    });
  }
  return y;
}

Tensor Graph::pixel_shuffle_freq(const Tensor& a) {
  if (a.ndim() != 3) throw std::invalid_argument("pixel_shuffle_freq: expects [2C,T,F], got " + shape_str(a.shape()));
  const int c2 = a.dim(0), t = a.dim(1), f = a.dim(2);
  if (c2 % 2 != 0) throw std::invalid_argument("pixel_shuffle_freq: odd channel count " + std::to_string(c2));
  const int c = c2 / 2;
  std::vector<double> out(size_t(a.size()));
  const double* pa = a.data().data();
  // out[ch, t, 2f+r] = in[2ch+r, t, f]
  for (int ch = 0; ch < c; ++ch) {
    for (int r = 0; r < 2; ++r) {
      const double* src = pa + (size_t(2 * ch + r) * t) * f;
      double* dst = out.data() + (size_t(ch) * t) * (2 * f) + r;
      for (int ti = 0; ti < t; ++ti) {
        for (int fi = 0; fi < f; ++fi) dst[size_t(ti) * (2 * f) + 2 * fi] = src[size_t(ti) * f + fi];
      }
    }
  }
  Tensor y = Tensor::from({c, t, 2 * f}, std::move(out));
  if (record_ && tracked(a)) {
    add_node({a}, {y}, [this, a, y, c, t, f]() {
      const double* g = out_grad(y);
      if (!g) return;
      auto& ga = grad_buf(a);
      for (int ch = 0; ch < c; ++ch) {
        for (int r = 0; r < 2; ++r) {
          double* dst = ga.data() + (size_t(2 * ch + r) * t) * f;
          const double* src = g + (size_t(ch) * t) * (2 * f) + r;
          for (int ti = 0; ti < t; ++ti) {
            for (int fi = 0; fi < f; ++fi) dst[size_t(ti) * f + fi] += src[size_t(ti) * (2 * f) + 2 * fi];
          }
        }
      }
    });
  }
  return y;
}

Tensor Graph::pixel_unshuffle_freq(const Tensor& a) {
  if (a.ndim() != 3) throw std::invalid_argument("pixel_unshuffle_freq: expects [C,T,2F], got " + shape_str(a.shape()));
  const int c = a.dim(0), t = a.dim(1), f2 = a.dim(2);
  if (f2 % 2 != 0) throw std::invalid_argument("pixel_unshuffle_freq: odd bin count " + std::to_string(f2));
  const int f = f2 / 2;
  std::vector<double> out(size_t(a.size()));
  const double* pa = a.data().data();
  for (int ch = 0; ch < c; ++ch) {
    for (int r = 0; r < 2; ++r) {
      double* dst = out.data() + (size_t(2 * ch + r) * t) * f;
      const double* src = pa + (size_t(ch) * t) * f2 + r;
      for (int ti = 0; ti < t; ++ti) {
        for (int fi = 0; fi < f; ++fi) dst[size_t(ti) * f + fi] = src[size_t(ti) * f2 + 2 * fi];
      }
    }
  }
  Tensor y = Tensor::from({2 * c, t, f}, std::move(out));
  if (record_ && tracked(a)) {
    add_node({a}, {y}, [this, a, y, c, t, f]() {
      const double* g = out_grad(y);
      if (!g) return;
      auto& ga = grad_buf(a);
      const int f2 = 2 * f;
      for (int ch = 0; ch < c; ++ch) {
        for (int r = 0; r < 2; ++r) {
          const double* src = g + (size_t(2 * ch + r) * t) * f;
          double* dst = ga.data() + (size_t(ch) * t) * f2 + r;
          for (int ti = 0; ti < t; ++ti) {
            for (int fi = 0; fi < f; ++fi) dst[size_t(ti) * f2 + 2 * fi] += src[size_t(ti) * f + fi];
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// linear algebra / reductions

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    shape_error("matmul", a.shape(), b.shape());
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(size_t(m) * n);
  MapMat(out.data(), m, n).noalias() =
      CMapMat(a.data().data(), m, k) * CMapMat(b.data().data(), k, n);
  Tensor y = Tensor::from({m, n}, std::move(out));
  if (record_ && (tracked(a) || tracked(b))) {
    add_node({a, b}, {y}, [this, a, b, y, m, k, n]() {
      const double* g = out_grad(y);
      if (!g) return;
      CMapMat G(g, m, n);
      if (tracked(a)) {
        MapMat(grad_buf(a).data(), m, k).noalias() += G * CMapMat(b.data().data(), k, n).transpose();
      }
      if (tracked(b)) {
        MapMat(grad_buf(b).data(), k, n).noalias() += CMapMat(a.data().data(), m, k).transpose() * G;
      }
    });
  }
  return y;
}

Tensor Graph::sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor y = Tensor::scalar(s);
  if (record_ && tracked(a)) {
    add_node({a}, {y}, [this, a, y]() {
      const double* g = out_grad(y);
      if (!g) return;
      auto& ga = grad_buf(a);
      const int64_t n = a.size();
      for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[0];
    });
  }
  return y;
}

Tensor Graph::mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double inv = 1.0 / double(a.size());
  Tensor y = Tensor::scalar(s * inv);
  if (record_ && tracked(a)) {
    add_node({a}, {y}, [this, a, y, inv]() {
      const double* g = out_grad(y);
      if (!g) return;
      auto& ga = grad_buf(a);
      const int64_t n = a.size();
      for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += g[0] * inv;
    });
  }
  return y;
}

Tensor Graph::col_mean(const Tensor& a) {
  if (a.ndim() != 2) throw std::invalid_argument("col_mean: expects 2-D, got " + shape_str(a.shape()));
  const int t = a.dim(0), d = a.dim(1);
  std::vector<double> out(size_t(d), 0.0);
  const double* pa = a.data().data();
  for (int i = 0; i < t; ++i) {
    for (int j = 0; j < d; ++j) out[size_t(j)] += pa[size_t(i) * d + j];
  }
  const double inv = 1.0 / double(t);
  for (double& v : out) v *= inv;
  Tensor y = Tensor::from({d}, std::move(out));
  if (record_ && tracked(a)) {
    add_node({a}, {y}, [this, a, y, t, d, inv]() {
      const double* g = out_grad(y);
      if (!g) return;
      auto& ga = grad_buf(a);
      for (int i = 0; i < t; ++i) {
        for (int j = 0; j < d; ++j) ga[size_t(i) * d + j] += g[j] * inv;
      }
    });
  }
  return y;
}

namespace {
enum class ColOp { Add, Sub, Div };
}

template <ColOp OP>
static Tensor colwise_impl(Graph& g, const Tensor& a, const Tensor& v, const char* name);

Tensor Graph::add_cols(const Tensor& a, const Tensor& v) { return colwise_impl<ColOp::Add>(*this, a, v, "add_cols"); }
Tensor Graph::sub_cols(const Tensor& a, const Tensor& v) { return colwise_impl<ColOp::Sub>(*this, a, v, "sub_cols"); }
Tensor Graph::div_cols(const Tensor& a, const Tensor& v) { return colwise_impl<ColOp::Div>(*this, a, v, "div_cols"); }

template <ColOp OP>
static Tensor colwise_impl(Graph& g, const Tensor& a, const Tensor& v, const char* name) {
  if (a.ndim() != 2 || v.ndim() != 1 || a.dim(1) != v.dim(0)) {
    throw std::invalid_argument(std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(v.shape()));
  }
  const int t = a.dim(0), d = a.dim(1);
  std::vector<double> out(size_t(a.size()));
  const double* pa = a.data().data();
  const double* pv = v.data().data();
  for (int i = 0; i < t; ++i) {
    for (int j = 0; j < d; ++j) {
      const double x = pa[size_t(i) * d + j];
      if constexpr (OP == ColOp::Add) out[size_t(i) * d + j] = x + pv[j];
      if constexpr (OP == ColOp::Sub) out[size_t(i) * d + j] = x - pv[j];
      if constexpr (OP == ColOp::Div) out[size_t(i) * d + j] = x / pv[j];
    }
  }
  Tensor y = Tensor::from(a.shape(), std::move(out));
  if (g.recording() && (g.tracked(a) || g.tracked(v))) {
    g.add_node({a, v}, {y}, [&g, a, v, y, t, d]() {
      const double* grad = g.out_grad(y);
      if (!grad) return;
      const double* pv = v.data().data();
      const double* pa = a.data().data();
      if (g.tracked(a)) {
        auto& ga = g.grad_buf(a);
        for (int i = 0; i < t; ++i) {
          for (int j = 0; j < d; ++j) {
            double gg = grad[size_t(i) * d + j];
            if constexpr (OP == ColOp::Div) gg /= pv[j];
            ga[size_t(i) * d + j] += gg;
          }
        }
      }
      if (g.tracked(v)) {
        auto& gv = g.grad_buf(v);
        for (int i = 0; i < t; ++i) {
          for (int j = 0; j < d; ++j) {
            const double gg = grad[size_t(i) * d + j];
            if constexpr (OP == ColOp::Add) gv[size_t(j)] += gg;
            if constexpr (OP == ColOp::Sub) gv[size_t(j)] -= gg;
            if constexpr (OP == ColOp::Div)
              gv[size_t(j)] -= gg * pa[size_t(i) * d + j] / (pv[j] * pv[j]);
          }
        }
      }
    });
  }
  return y;
}

Tensor Graph::outer_add_rows(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1)) {
    shape_error("outer_add_rows", a.shape(), b.shape());
  }
  const int t = a.dim(0), u = b.dim(0), j = a.dim(1);
  std::vector<double> out(size_t(t) * u * j);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (int ti = 0; ti < t; ++ti) {
    for (int ui = 0; ui < u; ++ui) {
      double* dst = out.data() + (size_t(ti) * u + ui) * j;
      const double* ra = pa + size_t(ti) * j;
      const double* rb = pb + size_t(ui) * j;
      for (int k = 0; k < j; ++k) dst[k] = ra[k] + rb[k];
    }
  }
  Tensor y = Tensor::from({t, u, j}, std::move(out));
  if (record_ && (tracked(a) || tracked(b))) {
    add_node({a, b}, {y}, [this, a, b, y, t, u, j]() {
      const double* g = out_grad(y);
      if (!g) return;
      if (tracked(a)) {
        auto& ga = grad_buf(a);
        for (int ti = 0; ti < t; ++ti) {
          for (int ui = 0; ui < u; ++ui) {
            const double* src = g + (size_t(ti) * u + ui) * j;
            for (int k = 0; k < j; ++k) ga[size_t(ti) * j + k] += src[k];
          }
        }
      }
      if (tracked(b)) {
        auto& gb = grad_buf(b);
        for (int ti = 0; ti < t; ++ti) {
          for (int ui = 0; ui < u; ++ui) {
            const double* src = g + (size_t(ti) * u + ui) * j;
            for (int k = 0; k < j; ++k) gb[size_t(ui) * j + k] += src[k];
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// softmax family

Tensor Graph::softmax(const Tensor& a) {
  const int v = a.dim(a.ndim() - 1);
  const int64_t rows = a.size() / v;
  std::vector<double> out(size_t(a.size()));
  const double* pa = a.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = pa + r * v;
    double* y = out.data() + r * v;
    double mx = x[0];
    for (int i = 1; i < v; ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (int i = 0; i < v; ++i) z += (y[i] = std::exp(x[i] - mx));
    const double inv = 1.0 / z;
    for (int i = 0; i < v; ++i) y[i] *= inv;
  }
  Tensor y = Tensor::from(a.shape(), std::move(out));
  if (record_ && tracked(a)) {
    add_node({a}, {y}, [this, a, y, rows, v]() {
      const double* g = out_grad(y);
      if (!g) return;
      auto& ga = grad_buf(a);
      const double* p = y.data().data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* pr = p + r * v;
        const double* gr = g + r * v;
        double dot = 0.0;
        for (int i = 0; i < v; ++i) dot += gr[i] * pr[i];
        for (int i = 0; i < v; ++i) ga[size_t(r * v + i)] += pr[i] * (gr[i] - dot);
      }
    });
  }
  return y;
}

Tensor Graph::log_softmax(const Tensor& a) {
  const int v = a.dim(a.ndim() - 1);
  const int64_t rows = a.size() / v;
  std::vector<double> out(size_t(a.size()));
  const double* pa = a.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = pa + r * v;
    double* y = out.data() + r * v;
    double mx = x[0];
    for (int i = 1; i < v; ++i) mx = std::max(mx, x[i]);
    double z = 0.0;
    for (int i = 0; i < v; ++i) z += std::exp(x[i] - mx);
    const double lz = mx + std::log(z);
    for (int i = 0; i < v; ++i) y[i] = x[i] - lz;
  }
  Tensor y = Tensor::from(a.shape(), std::move(out));
  if (record_ && tracked(a)) {
    add_node({a}, {y}, [this, a, y, rows, v]() {
      const double* g = out_grad(y);
      if (!g) return;
      auto& ga = grad_buf(a);
      const double* lp = y.data().data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* lr = lp + r * v;
        const double* gr = g + r * v;
        double gsum = 0.0;
        for (int i = 0; i < v; ++i) gsum += gr[i];
        for (int i = 0; i < v; ++i) ga[size_t(r * v + i)] += gr[i] - std::exp(lr[i]) * gsum;
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// conv2d via im2col

Tensor Graph::conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const ConvSpec& sp) {
  if (x.ndim() != 3) throw std::invalid_argument("conv2d: input must be [C,T,F], got " + shape_str(x.shape()));
  if (w.ndim() != 4) throw std::invalid_argument("conv2d: weight must be [Co,Ci,kt,kf], got " + shape_str(w.shape()));
  const int ci = x.dim(0), t = x.dim(1), f = x.dim(2);
  const int co = w.dim(0), kt = w.dim(2), kf = w.dim(3);
  if (w.dim(1) != ci) shape_error("conv2d", x.shape(), w.shape());
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != co)) shape_error("conv2d", w.shape(), b.shape());
  const int tp = t + sp.pad_t_lo + sp.pad_t_hi;
  const int fp = f + sp.pad_f_lo + sp.pad_f_hi;
  if (tp < kt || fp < kf) {
    throw std::invalid_argument("conv2d: kernel larger than padded input, " + shape_str(x.shape()) +
                                " vs " + shape_str(w.shape()));
  }
  const int to = (tp - kt) / sp.stride_t + 1;
  const int fo = (fp - kf) / sp.stride_f + 1;
  const int64_t ncols = int64_t(to) * fo;
  const int krows = ci * kt * kf;

  auto col = std::make_shared<std::vector<double>>(size_t(krows) * ncols, 0.0);
  const double* px = x.data().data();
  for (int c = 0; c < ci; ++c) {
    for (int dt = 0; dt < kt; ++dt) {
      for (int df = 0; df < kf; ++df) {
        double* dst = col->data() + (size_t(c) * kt * kf + size_t(dt) * kf + df) * ncols;
        for (int oti = 0; oti < to; ++oti) {
          const int it = oti * sp.stride_t + dt - sp.pad_t_lo;
          if (it < 0 || it >= t) continue;
          const double* src = px + (size_t(c) * t + it) * f;
          double* drow = dst + size_t(oti) * fo;
          for (int ofi = 0; ofi < fo; ++ofi) {
            const int fi = ofi * sp.stride_f + df - sp.pad_f_lo;
            if (fi >= 0 && fi < f) drow[ofi] = src[fi];
          }
        }
      }
    }
  }
  std::vector<double> out(size_t(co) * ncols);
  MapMat(out.data(), co, int(ncols)).noalias() =
      CMapMat(w.data().data(), co, krows) * CMapMat(col->data(), krows, int(ncols));
  if (b.defined()) {
    const double* pb = b.data().data();
    for (int c = 0; c < co; ++c) {
      double* row = out.data() + size_t(c) * ncols;
      for (int64_t i = 0; i < ncols; ++i) row[size_t(i)] += pb[c];
    }
  }
  Tensor y = Tensor::from({co, to, fo}, std::move(out));
  std::vector<Tensor> ins{x, w};
  if (b.defined()) ins.push_back(b);
  if (record_ && any_tracked(ins)) {
    // keep the im2col matrix for the weight gradient
    bool need_col = tracked(w);
    if (!need_col) col.reset();
    ConvSpec spc = sp;
    add_node(ins, {y}, [this, x, w, b, y, col, spc, ci, t, f, co, kt, kf, to, fo, ncols, krows]() {
      const double* g = out_grad(y);
      if (!g) return;
      CMapMat G(g, co, int(ncols));
      if (tracked(w) && col) {
        MapMat(grad_buf(w).data(), co, krows).noalias() +=
            G * CMapMat(col->data(), krows, int(ncols)).transpose();
      }
      if (b.defined() && tracked(b)) {
        auto& gb = grad_buf(b);
        for (int c = 0; c < co; ++c) {
          double s = 0.0;
          const double* row = g + size_t(c) * ncols;
          for (int64_t i = 0; i < ncols; ++i) s += row[size_t(i)];
          gb[size_t(c)] += s;
        }
      }
      if (tracked(x)) {
        std::vector<double> dcol(size_t(krows) * ncols);
        MapMat(dcol.data(), krows, int(ncols)).noalias() =
            CMapMat(w.data().data(), co, krows).transpose() * G;
        auto& gx = grad_buf(x);
        for (int c = 0; c < ci; ++c) {
          for (int dt = 0; dt < kt; ++dt) {
            for (int df = 0; df < kf; ++df) {
              const double* src = dcol.data() + (size_t(c) * kt * kf + size_t(dt) * kf + df) * ncols;
              for (int oti = 0; oti < to; ++oti) {
                const int it = oti * spc.stride_t + dt - spc.pad_t_lo;
                if (it < 0 || it >= t) continue;
                double* drow = gx.data() + (size_t(c) * t + it) * f;
                const double* srow = src + size_t(oti) * fo;
                for (int ofi = 0; ofi < fo; ++ofi) {
                  const int fi = ofi * spc.stride_f + df - spc.pad_f_lo;
                  if (fi >= 0 && fi < f) drow[fi] += srow[ofi];
                }
              }
            }
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// lstm cell

namespace {

struct CellStash {
  std::vector<double> i, f, cc, o, tc, cnew;
};

}  // namespace

static std::pair<Tensor, Tensor> lstm_cell_common(Graph& g, const Tensor* x, const Tensor* gx,
                                                  const Tensor& h, const Tensor& c,
                                                  const Tensor* w_ih, const Tensor& w_hh,
                                                  const Tensor& bias) {
  const int hd = h.dim(0);
  const int g4 = 4 * hd;
  if (c.ndim() != 1 || c.dim(0) != hd) shape_error("lstm_cell", h.shape(), c.shape());
  if (w_hh.ndim() != 2 || w_hh.dim(0) != hd || w_hh.dim(1) != g4) shape_error("lstm_cell", h.shape(), w_hh.shape());
  if (bias.ndim() != 1 || bias.dim(0) != g4) shape_error("lstm_cell", w_hh.shape(), bias.shape());

  std::vector<double> gates(size_t(g4), 0.0);
  if (gx) {
    if ((*gx).ndim() != 1 || (*gx).dim(0) != g4) shape_error("lstm_cell", gx->shape(), bias.shape());
    std::copy(gx->data().begin(), gx->data().end(), gates.begin());
  } else {
    const int xd = x->dim(0);
    if (w_ih->ndim() != 2 || w_ih->dim(0) != xd || w_ih->dim(1) != g4) shape_error("lstm_cell", x->shape(), w_ih->shape());
    MapVec(gates.data(), g4).noalias() =
        CMapMat(w_ih->data().data(), xd, g4).transpose() * CMapVec(x->data().data(), xd);
  }
  MapVec(gates.data(), g4).noalias() +=
      CMapMat(w_hh.data().data(), hd, g4).transpose() * CMapVec(h.data().data(), hd);
  for (int j = 0; j < g4; ++j) gates[size_t(j)] += bias.data()[size_t(j)];

  auto st = std::make_shared<CellStash>();
  st->i.resize(size_t(hd));
  st->f.resize(size_t(hd));
  st->cc.resize(size_t(hd));
  st->o.resize(size_t(hd));
  st->tc.resize(size_t(hd));
  st->cnew.resize(size_t(hd));
  std::vector<double> hnew(size_t(hd), 0.0);
  const double* pc = c.data().data();
  for (int j = 0; j < hd; ++j) {
    const double gi = 1.0 / (1.0 + std::exp(-gates[size_t(j)]));
    const double gf = 1.0 / (1.0 + std::exp(-gates[size_t(hd + j)]));
    const double gc = std::tanh(gates[size_t(2 * hd + j)]);
    const double go = 1.0 / (1.0 + std::exp(-gates[size_t(3 * hd + j)]));
    const double cn = gf * pc[j] + gi * gc;
    const double tc = std::tanh(cn);
    st->i[size_t(j)] = gi;
    st->f[size_t(j)] = gf;
    st->cc[size_t(j)] = gc;
    st->o[size_t(j)] = go;
    st->tc[size_t(j)] = tc;
    st->cnew[size_t(j)] = cn;
    hnew[size_t(j)] = go * tc;
  }
  Tensor hy = Tensor::from({hd}, std::move(hnew));
  Tensor cy = Tensor::from({hd}, st->cnew);

  std::vector<Tensor> ins{h, c, w_hh, bias};
  if (x) ins.push_back(*x);
  if (gx) ins.push_back(*gx);
  if (w_ih) ins.push_back(*w_ih);
  if (g.recording() && [&] {
        for (const Tensor& t : ins)
          if (g.tracked(t)) return true;
        return false;
      }()) {
    Tensor xt = x ? *x : Tensor();
    Tensor gxt = gx ? *gx : Tensor();
    Tensor wih = w_ih ? *w_ih : Tensor();
    g.add_node(ins, {hy, cy}, [&g, st, xt, gxt, wih, h, c, w_hh, bias, hy, cy, hd, g4]() {
      const double* gh = g.out_grad(hy);
      const double* gc = g.out_grad(cy);
      if (!gh && !gc) return;
      std::vector<double> dg(size_t(g4), 0.0);
      std::vector<double> dc_in(size_t(hd), 0.0);
      const double* pc = c.data().data();
      for (int j = 0; j < hd; ++j) {
        const double ghj = gh ? gh[j] : 0.0;
        const double gcj = gc ? gc[j] : 0.0;
        const double o = st->o[size_t(j)];
        const double tc = st->tc[size_t(j)];
        const double dcn = gcj + ghj * o * (1.0 - tc * tc);
        const double i = st->i[size_t(j)];
        const double f = st->f[size_t(j)];
        const double cc = st->cc[size_t(j)];
        const double ddo = ghj * tc;
        dg[size_t(j)] = dcn * cc * i * (1.0 - i);
        dg[size_t(hd + j)] = dcn * pc[j] * f * (1.0 - f);
        dg[size_t(2 * hd + j)] = dcn * i * (1.0 - cc * cc);
        dg[size_t(3 * hd + j)] = ddo * o * (1.0 - o);
        dc_in[size_t(j)] = dcn * f;
      }
      if (g.tracked(c)) axpy(g.grad_buf(c), dc_in.data(), hd);
      if (g.tracked(bias)) axpy(g.grad_buf(bias), dg.data(), g4);
      if (g.tracked(h)) {
        MapVec(g.grad_buf(h).data(), hd).noalias() +=
            CMapMat(w_hh.data().data(), hd, g4) * CMapVec(dg.data(), g4);
      }
      if (g.tracked(w_hh)) {
        MapMat(g.grad_buf(w_hh).data(), hd, g4).noalias() +=
            CMapVec(h.data().data(), hd) * Eigen::Map<const Eigen::RowVectorXd>(dg.data(), g4);
      }
      if (gxt.defined() && g.tracked(gxt)) axpy(g.grad_buf(gxt), dg.data(), g4);
      if (xt.defined()) {
        const int xd = xt.dim(0);
        if (g.tracked(xt)) {
          MapVec(g.grad_buf(xt).data(), xd).noalias() +=
              CMapMat(wih.data().data(), xd, g4) * CMapVec(dg.data(), g4);
        }
        if (g.tracked(wih)) {
          MapMat(g.grad_buf(wih).data(), xd, g4).noalias() +=
              CMapVec(xt.data().data(), xd) * Eigen::Map<const Eigen::RowVectorXd>(dg.data(), g4);
        }
      }
    });
  }
  return {hy, cy};
}

std::pair<Tensor, Tensor> Graph::lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c,
                                           const Tensor& w_ih, const Tensor& w_hh, const Tensor& bias) {
  return lstm_cell_common(*this, &x, nullptr, h, c, &w_ih, w_hh, bias);
}

std::pair<Tensor, Tensor> Graph::lstm_cell_pre(const Tensor& gx, const Tensor& h, const Tensor& c,
                                               const Tensor& w_hh, const Tensor& bias) {
  return lstm_cell_common(*this, nullptr, &gx, h, c, nullptr, w_hh, bias);
}

// ---------------------------------------------------------------------------
// gradient checking

static double rel_err(double a, double b) {
  const double denom = std::max({std::fabs(a), std::fabs(b), 1e-5});
  return std::fabs(a - b) / denom;
}

static std::vector<int64_t> pick_coords(int64_t n, int max_coords, uint64_t seed) {
  std::vector<int64_t> idx(size_t(n), 0);
  std::iota(idx.begin(), idx.end(), 0);
  if (max_coords < 0 || int64_t(max_coords) >= n) return idx;
  Rng rng(Rng::derive({seed, uint64_t(n)}));
  for (int i = 0; i < max_coords; ++i) {
    int64_t j = i + rng.uniform_int(int(n - i));
    std::swap(idx[size_t(i)], idx[size_t(j)]);
  }
  idx.resize(size_t(max_coords));
  return idx;
}

double grad_check(const std::function<Tensor(Graph&, const Tensor&)>& f, const Tensor& x,
                  double eps, int max_coords, uint64_t seed) {
  Tensor xg = Tensor::from(x.shape(), x.data(), true);
  Graph g;
  Tensor loss = f(g, xg);
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite function value");
  g.backward(loss);
  std::vector<double> analytic = g.grad_or_zero(xg);

  double worst = 0.0;
  for (int64_t i : pick_coords(x.size(), max_coords, seed)) {
    std::vector<double> d = x.data();
    d[size_t(i)] += eps;
    Graph gp(false);
    const double fp = f(gp, Tensor::from(x.shape(), d)).item();
    d[size_t(i)] -= 2 * eps;
    Graph gm(false);
    const double fm = f(gm, Tensor::from(x.shape(), std::move(d))).item();
    const double fd = (fp - fm) / (2 * eps);
    worst = std::max(worst, rel_err(fd, analytic[size_t(i)]));
  }
  return worst;
}

double grad_check_params(const std::function<Tensor(Graph&)>& loss_fn, const NamedTensors& params,
                         double eps, int max_coords_per_tensor, uint64_t seed) {
  Graph g;
  Tensor loss = loss_fn(g);
  if (!std::isfinite(loss.item())) throw NumericError("grad_check_params: non-finite loss");
  g.backward(loss);

  double worst = 0.0;
  uint64_t k = 0;
  for (const auto& [name, p] : params) {
    std::vector<double> analytic = g.grad_or_zero(p);
    for (int64_t i : pick_coords(p.size(), max_coords_per_tensor, Rng::derive({seed, ++k}))) {
      auto& d = const_cast<Tensor&>(p).mutable_data();
      const double orig = d[size_t(i)];
      d[size_t(i)] = orig + eps;
      Graph gp(false);
      const double fp = loss_fn(gp).item();
      d[size_t(i)] = orig - eps;
      Graph gm(false);
      const double fm = loss_fn(gm).item();
      d[size_t(i)] = orig;
      const double fd = (fp - fm) / (2 * eps);
      worst = std::max(worst, rel_err(fd, analytic[size_t(i)]));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// checkpoint container

namespace {

constexpr char kMagic[4] = {'E', 'H', 'S', 'R'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("checkpoint: cannot open for writing: " + path);
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  write_pod(os, uint32_t(params.size()));
  for (const auto& [name, t] : params) {
    write_pod(os, uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    write_pod(os, uint32_t(t.ndim()));
    for (int d = 0; d < t.ndim(); ++d) write_pod(os, uint32_t(t.dim(d)));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             std::streamsize(t.data().size() * sizeof(double)));
  }
  if (!os) throw DataError("checkpoint: write failed: " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw DataError("checkpoint: bad magic in " + path);
  const auto version = read_pod<uint32_t>(is);
  if (version != kVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = read_pod<uint32_t>(is);
  NamedTensors out;
  out.reserve(count);
  for (uint32_t r = 0; r < count; ++r) {
    const auto name_len = read_pod<uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto ndim = read_pod<uint32_t>(is);
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = int(read_pod<uint32_t>(is));
    std::vector<double> data(size_t(numel(shape)));
    is.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size() * sizeof(double)));
    if (!is) throw DataError("checkpoint: truncated record '" + name + "' in " + path);
    out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  return out;
}

void load_checkpoint_into(const std::string& path, const NamedTensors& params) {
  NamedTensors stored = load_checkpoint(path);
  std::unordered_map<std::string, Tensor> by_name;
  for (auto& [n, t] : stored) by_name.emplace(n, t);
  for (const auto& [name, dst] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint: missing tensor '" + name + "' in " + path);
    if (it->second.shape() != dst.shape()) {
      throw DataError("checkpoint: shape mismatch for '" + name + "': file " +
                      shape_str(it->second.shape()) + " vs model " + shape_str(dst.shape()));
    }
    const_cast<Tensor&>(dst).mutable_data() = it->second.data();
  }
}

uint64_t params_checksum(const NamedTensors& params) {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto eat = [&h](const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : params) {
    eat(name.data(), name.size());
    eat(t.data().data(), t.data().size() * sizeof(double));
  }
  return h;
}

void copy_parameters(const NamedTensors& dst, const NamedTensors& src) {
  if (dst.size() != src.size()) {
    throw std::invalid_argument("copy_parameters: parameter count mismatch");
  }
  for (size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].first != src[i].first || dst[i].second.shape() != src[i].second.shape()) {
      throw std::invalid_argument("copy_parameters: mismatch at '" + dst[i].first + "'");
    }
    const_cast<Tensor&>(dst[i].second).mutable_data() = src[i].second.data();
  }
}

Tensor init_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(double(fan_in));
  std::vector<double> data(size_t(numel(shape)));
  for (double& v : data) v = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(data), true);
}

}  // namespace enhasr::ag

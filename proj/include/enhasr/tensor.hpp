// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "enhasr/rng.hpp"

namespace enhasr::ag {

struct TensorData {
  std::vector<int> shape;
  std::vector<double> data;  // row-major
  bool requires_grad = false;
  std::vector<double> grad;  // filled by the trainer after cross-graph summation
};

int64_t numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Cheap value handle over shared storage. Storage is treated as immutable once
// the tensor has entered a Graph; mutable_data() is for construction and for
// single-threaded optimizer updates between forward passes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int dim(int axis) const { return impl_->shape[size_t(axis)]; }
  int ndim() const { return int(impl_->shape.size()); }
  int64_t size() const { return int64_t(impl_->data.size()); }
  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& mutable_data() { return impl_->data; }
  double item() const;
  bool requires_grad() const { return impl_->requires_grad; }
  std::vector<double>& grad() { return impl_->grad; }
  const std::vector<double>& grad() const { return impl_->grad; }

  TensorData* raw() const { return impl_.get(); }

 private:
  std::shared_ptr<TensorData> impl_;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct ConvSpec {
  int stride_t = 1, stride_f = 1;
  int pad_t_lo = 0, pad_t_hi = 0;
  int pad_f_lo = 0, pad_f_hi = 0;
};

// Reverse-mode tape. Ops execute eagerly and append a backward step; the
// backward pass walks the tape in exact reverse order. A Graph is confined to
// one thread. Parameter tensors may be shared read-only across graphs because
// gradients live in the graph, not in the tensor.
class Graph {
 public:
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // elementwise / scalar
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor div(const Tensor& a, const Tensor& b);
  Tensor add_scalar(const Tensor& a, double c);
  Tensor scale(const Tensor& a, double c);
  Tensor exp(const Tensor& a);
  Tensor log(const Tensor& a);
  Tensor sqrt(const Tensor& a);
  Tensor square(const Tensor& a);
  Tensor abs(const Tensor& a);
  Tensor clamp_min(const Tensor& a, double lo);
  Tensor sigmoid(const Tensor& a);
  Tensor tanh(const Tensor& a);
  Tensor relu(const Tensor& a);
  Tensor elu(const Tensor& a);

  // shape
  Tensor concat(const std::vector<Tensor>& parts, int axis);
  Tensor slice(const Tensor& a, int axis, int begin, int end);
  Tensor reshape(const Tensor& a, std::vector<int> shape);
  Tensor transpose(const Tensor& a);               // 2-D
  Tensor pad(const Tensor& a, const std::vector<std::pair<int, int>>& widths);
  Tensor subsample_rows(const Tensor& a);          // [T,D] -> keep even rows
  Tensor pixel_shuffle_freq(const Tensor& a);      // [2C,T,F] -> [C,T,2F]
  Tensor pixel_unshuffle_freq(const Tensor& a);    // inverse of the above

  // linear algebra / reductions
  Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n]
  Tensor sum(const Tensor& a);                      // -> [1]
  Tensor mean(const Tensor& a);                     // -> [1]
  Tensor col_mean(const Tensor& a);                 // [T,D] -> [D]
  Tensor add_cols(const Tensor& a, const Tensor& v);  // v has one entry per column
  Tensor sub_cols(const Tensor& a, const Tensor& v);
  Tensor div_cols(const Tensor& a, const Tensor& v);
  Tensor outer_add_rows(const Tensor& a, const Tensor& b);  // [T,J],[U,J] -> [T,U,J]

  // softmax family, over the last axis
  Tensor softmax(const Tensor& a);
  Tensor log_softmax(const Tensor& a);

  // structured ops
  Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, const ConvSpec& spec);
  std::pair<Tensor, Tensor> lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c,
                                      const Tensor& w_ih, const Tensor& w_hh, const Tensor& bias);
  // variant taking precomputed input gates gx = x . w_ih (one row)
  std::pair<Tensor, Tensor> lstm_cell_pre(const Tensor& gx, const Tensor& h, const Tensor& c,
                                          const Tensor& w_hh, const Tensor& bias);

  // --- custom-node interface (used by dsp/rnnt ops defined elsewhere) ---
  // `outputs` were computed eagerly from `inputs`; `backward` reads output
  // grads via out_grad() and accumulates into grad_buf(input).
  void add_node(std::vector<Tensor> inputs, std::vector<Tensor> outputs,
                std::function<void()> backward);
  bool recording() const { return record_; }
  // true when gradient will be requested through this tensor
  bool tracked(const Tensor& t) const;
  const double* out_grad(const Tensor& t) const;    // nullptr if no grad flowed
  std::vector<double>& grad_buf(const Tensor& t);   // zero-initialized on demand

  void backward(const Tensor& loss);
  bool has_grad(const Tensor& t) const;
  const std::vector<double>& grad(const Tensor& t) const;      // throws if absent
  std::vector<double> grad_or_zero(const Tensor& t) const;
  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<Tensor> inputs;
    std::vector<Tensor> outputs;
    std::function<void()> backward;
  };
  Tensor make_out(std::vector<int> shape, std::vector<double> data,
                  const std::vector<Tensor>& inputs);
  bool any_tracked(const std::vector<Tensor>& ts) const;

  bool record_ = true;
  std::vector<Node> nodes_;
  std::unordered_set<const TensorData*> active_;
  std::unordered_map<const TensorData*, std::vector<double>> grads_;
  bool ran_backward_ = false;
};

// Central-finite-difference gradient check of a scalar-valued function of x.
// Rebuilds the forward graph for every probe; returns the max relative error
// over the checked coordinates (all of them when max_coords < 0).
double grad_check(const std::function<Tensor(Graph&, const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5, int max_coords = -1, uint64_t seed = 1);

// Same check against a set of live parameter tensors: `loss_fn` must rebuild
// the forward pass from current parameter values on every call. Coordinates
// are perturbed in place and restored.
double grad_check_params(const std::function<Tensor(Graph&)>& loss_fn, const NamedTensors& params,
                         double eps = 1e-5, int max_coords_per_tensor = -1, uint64_t seed = 1);

// Checkpoint container: flat (name, shape, f64 data) records, little-endian.
void save_checkpoint(const std::string& path, const NamedTensors& params);
NamedTensors load_checkpoint(const std::string& path);
// Copies stored values into existing tensors, matching by name and shape.
void load_checkpoint_into(const std::string& path, const NamedTensors& params);

// FNV-1a over the raw parameter bytes, for freeze-contract assertions.
uint64_t params_checksum(const NamedTensors& params);

// Copies values between matching parameter lists (same names and shapes).
void copy_parameters(const NamedTensors& dst, const NamedTensors& src);

Tensor init_uniform(std::vector<int> shape, int fan_in, Rng& rng);

}  // namespace enhasr::ag

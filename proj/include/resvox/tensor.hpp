#pragma once

// Dense row-major double tensors plus the reverse-mode tape they record on.

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "resvox/common.hpp"

namespace resvox {

using Shape = std::vector<long>;

inline long shape_numel(const Shape& s) {
  long n = 1;
  for (long d : s) {
    if (d < 0) fail("negative extent in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily, only when requires_grad
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false) {
    n_ = std::make_shared<TensorNode>();
    n_->shape = std::move(shape);
    n_->value.assign(shape_numel(n_->shape), fill);
    n_->requires_grad = requires_grad;
  }

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false) {
    if (long(values.size()) != shape_numel(shape))
      fail("Tensor::from: ", values.size(), " values for shape ",
           shape_str(shape));
    Tensor t;
    t.n_ = std::make_shared<TensorNode>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(values);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return bool(n_); }
  const Shape& shape() const { return n_->shape; }
  long rank() const { return long(n_->shape.size()); }
  long size() const { return long(n_->value.size()); }
  long extent(long dim) const { return n_->shape[size_t(dim)]; }

  double* data() { return n_->value.data(); }
  const double* data() const { return n_->value.data(); }
  std::vector<double>& vec() { return n_->value; }
  const std::vector<double>& vec() const { return n_->value; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  // Grad buffer, allocated as zeros on first touch.
  std::vector<double>& grad() {
    if (n_->grad.size() != n_->value.size())
      n_->grad.assign(n_->value.size(), 0.0);
    return n_->grad;
  }
  const std::vector<double>& grad_const() const { return n_->grad; }
  void zero_grad() { n_->grad.assign(n_->value.size(), 0.0); }

  double item() const {
    if (size() != 1) fail("Tensor::item on shape ", shape_str(shape()));
    return n_->value[0];
  }

  long linear_index(std::initializer_list<long> idx) const {
    if (long(idx.size()) != rank())
      fail("index rank ", idx.size(), " for shape ", shape_str(shape()));
    long lin = 0;
    auto it = idx.begin();
    for (long d = 0; d < rank(); ++d, ++it) {
      if (*it < 0 || *it >= n_->shape[size_t(d)])
        fail("index out of range in dim ", d, " for shape ",
             shape_str(shape()));
      lin = lin * n_->shape[size_t(d)] + *it;
    }
    return lin;
  }

  double at(std::initializer_list<long> idx) const {
    return n_->value[size_t(linear_index(idx))];
  }
  double& at(std::initializer_list<long> idx) {
    return n_->value[size_t(linear_index(idx))];
  }

  // Deep copy of values; the copy starts detached from any graph.
  Tensor clone() const {
    Tensor t;
    t.n_ = std::make_shared<TensorNode>();
    t.n_->shape = n_->shape;
    t.n_->value = n_->value;
    t.n_->requires_grad = false;
    return t;
  }

  std::shared_ptr<TensorNode> node() const { return n_; }

 private:
  std::shared_ptr<TensorNode> n_;
};

// Reverse-mode tape. Constructing one makes it the active recording target;
// destruction restores the previous one. Ops record a backward closure when
// a tape is active and some input wants gradients; Tape::backward replays
// the closures in reverse, accumulating into .grad buffers.
class Tape {
 public:
  Tape() : prev_(active_ptr()) { active_ptr() = this; }
  ~Tape() { active_ptr() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_ptr(); }

  void record(const char* op, std::shared_ptr<TensorNode> out,
              std::function<void()> backward) {
    steps_.push_back({op, std::move(out), std::move(backward)});
  }

  size_t size() const { return steps_.size(); }

  // Steps whose output never received gradient are skipped: nothing that
  // reaches the loss depends on them, so their contribution is zero. This
  // also covers subgraphs cut off by stop_gradient and side outputs the
  // caller chose not to fold into the loss.
  void backward(Tensor loss) {
    if (loss.size() != 1)
      fail("Tape::backward: loss must be scalar, got shape ",
           shape_str(loss.shape()));
    if (!loss.requires_grad())
      fail("Tape::backward: loss does not require gradients");
    loss.grad()[0] = 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it)
      if (!it->out->grad.empty()) it->fn();
  }

 private:
  struct Step {
    const char* op;
    std::shared_ptr<TensorNode> out;
    std::function<void()> fn;
  };

  static Tape*& active_ptr() {
    static thread_local Tape* active = nullptr;
    return active;
  }

  std::vector<Step> steps_;
  Tape* prev_ = nullptr;
};

namespace detail {

inline bool tape_wants(const Tensor& t) {
  return Tape::active() != nullptr && t.requires_grad();
}

inline void check_finite(const Tensor& t, const char* op) {
  if (!numeric_options().strict_finite) return;
  for (double v : t.vec())
    if (!std::isfinite(v)) fail("non-finite value produced by ", op);
}

}  // namespace detail

}  // namespace resvox

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "apc/error.hpp"

// Reverse-mode automatic differentiation over dense row-major float64 arrays.
//
// A graph is built implicitly by calling the free functions below on Var
// handles. Leaves created with requires_grad=true accumulate gradients across
// backward() calls until zero_grad(); interior nodes are rebuilt every forward
// pass and dropped together with the last Var referring to them.
//
// Broadcasting is restricted to scalar <-> array and equal shapes. Row and
// channel bias additions have their own explicit ops.
namespace apc::ag {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> data);

  static Array scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }
  static Array vector(std::vector<double> v);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  bool is_scalar() const { return data_.size() == 1; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> span() { return data_; }
  std::span<const double> span() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  // 2-D accessor.
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  Array reshaped(Shape shape) const;
  void fill(double v);

 private:
  Shape shape_;
  std::vector<double> data_;
};

struct NodeImpl;

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<NodeImpl> impl) : impl_(std::move(impl)) {}

  // Creates a leaf.
  static Var leaf(Array value, bool requires_grad = false);
  static Var constant(Array value) { return leaf(std::move(value), false); }
  static Var scalar(double v) { return leaf(Array::scalar(v), false); }

  bool defined() const { return impl_ != nullptr; }
  const Array& value() const;
  // Mutable access for optimizers and initializers. Must not be called while a
  // graph that captured this value is awaiting backward().
  Array& mutable_value();
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const;

  bool requires_grad() const;
  // Gradient with the same shape as value(); zeros if never touched.
  const Array& grad() const;
  Array& mutable_grad();
  bool has_grad() const;
  void zero_grad();

  NodeImpl* get() const { return impl_.get(); }
  const std::shared_ptr<NodeImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<NodeImpl> impl_;
};

// Receives the node's accumulated gradient and its forward value.
using BackwardFn = std::function<void(const Array& grad_out, const Array& out)>;

struct NodeImpl {
  Array value;
  Array grad;
  bool requires_grad = false;
  bool grad_allocated = false;
  std::vector<Var> parents;
  BackwardFn backward;

  void accumulate(const Array& g);
  Array& grad_buffer();
};

// Builds a non-leaf node. Parents that do not require gradients are dropped;
// if none remain the result is a constant and `fn` is discarded.
Var make_node(Array value, std::vector<Var> parents, BackwardFn fn);

// Accumulates `g` into `v`'s gradient when `v` requires gradients.
void accumulate(const Var& v, const Array& g);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add(const Var& a, double b);
Var mul(const Var& a, double b);
Var exp(const Var& a);
// Throws DomainError on any non-positive entry.
Var log(const Var& a);
Var neg(const Var& a);
// max(a, c) elementwise; the gradient at ties goes to a.
Var max_with(const Var& a, double c);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double alpha);
Var sigmoid(const Var& a);
Var square(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator+(const Var& a, double b) { return add(a, b); }
inline Var operator-(const Var& a, double b) { return add(a, -b); }
inline Var operator*(const Var& a, double b) { return mul(a, b); }
inline Var operator*(double b, const Var& a) { return mul(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

// ---- reductions ----
enum class Reduce { Sum, Mean, LogSumExp, Max };

struct MaxResult {
  Var value;
  std::vector<std::size_t> argmax;  // lowest index on ties
};

// Reduces along `axis` (the axis is removed from the result shape).
Var reduce(Reduce kind, const Var& a, std::size_t axis);
Var sum(const Var& a, std::size_t axis);
Var mean(const Var& a, std::size_t axis);
Var logsumexp(const Var& a, std::size_t axis);
MaxResult max(const Var& a, std::size_t axis);
// Whole-array reductions to a scalar.
Var sum_all(const Var& a);
Var mean_all(const Var& a);

// ---- linear algebra / conv ----
Var matmul(const Var& a, const Var& b);
// x: [N, Cin, H, W], k: [Cin, Cout, K, K]; output [N, Cout, (H-1)*s+K, (W-1)*s+K].
Var conv_transpose2d(const Var& x, const Var& k, std::size_t stride);

// ---- shape / structural ----
Var reshape(const Var& a, Shape shape);
// [B, H] + [H]
Var add_bias(const Var& a, const Var& bias);
// [N, C, H, W] + [C]
Var add_channel_bias(const Var& a, const Var& bias);
// Columns [begin, end) of a 2-D array.
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
// Row-wise log-softmax / softmax of a 1-D or 2-D array (last axis).
Var log_softmax(const Var& a);
Var softmax(const Var& a);
// out[i] = a[i, idx[i]] for 2-D a.
Var pick(const Var& a, std::span<const std::size_t> idx);
// Same value, no parents.
Var detach(const Var& a);

// Runs reverse-mode accumulation from a scalar root. Leaf gradients
// accumulate across calls; interior gradients are reset each call.
void backward(const Var& root);

// Parameter utilities.
void zero_grad(std::span<Var> params);

}  // namespace apc::ag

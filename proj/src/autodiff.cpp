#include "apc/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace apc::ag {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Array::Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel(shape_) != data_.size()) {
    throw ShapeError("array data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

Array Array::vector(std::vector<double> v) {
  Shape s{v.size()};
  return Array(std::move(s), std::move(v));
}

Array Array::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Array(std::move(shape), data_);
}

void Array::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

// ---------------------------------------------------------------------------

Array& NodeImpl::grad_buffer() {
  if (!grad_allocated) {
    grad = Array(value.shape(), 0.0);
    grad_allocated = true;
  }
  return grad;
}

void NodeImpl::accumulate(const Array& g) {
  Array& buf = grad_buffer();
  if (g.size() != buf.size()) {
    throw ShapeError("gradient shape " + shape_str(g.shape()) + " does not match value shape " +
                     shape_str(value.shape()));
  }
  double* dst = buf.data();
  const double* src = g.data();
  for (std::size_t i = 0, n = buf.size(); i < n; ++i) dst[i] += src[i];
}

Var Var::leaf(Array value, bool requires_grad) {
  auto impl = std::make_shared<NodeImpl>();
  impl->value = std::move(value);
  impl->requires_grad = requires_grad;
  return Var(std::move(impl));
}

const Array& Var::value() const {
  if (!impl_) throw Error("use of undefined Var");
  return impl_->value;
}

Array& Var::mutable_value() {
  if (!impl_) throw Error("use of undefined Var");
  return impl_->value;
}

double Var::item() const {
  const Array& v = value();
  if (v.size() != 1) throw ShapeError("item() on non-scalar of shape " + shape_str(v.shape()));
  return v[0];
}

bool Var::requires_grad() const { return impl_ && impl_->requires_grad; }

const Array& Var::grad() const {
  if (!impl_) throw Error("use of undefined Var");
  return impl_->grad_buffer();
}

Array& Var::mutable_grad() {
  if (!impl_) throw Error("use of undefined Var");
  return impl_->grad_buffer();
}

bool Var::has_grad() const { return impl_ && impl_->grad_allocated; }

void Var::zero_grad() {
  if (impl_ && impl_->grad_allocated) impl_->grad.fill(0.0);
}

Var make_node(Array value, std::vector<Var> parents, BackwardFn fn) {
  auto impl = std::make_shared<NodeImpl>();
  impl->value = std::move(value);
  std::erase_if(parents, [](const Var& p) { return !p.requires_grad(); });
  if (!parents.empty()) {
    impl->requires_grad = true;
    impl->parents = std::move(parents);
    impl->backward = std::move(fn);
  }
  return Var(std::move(impl));
}

void accumulate(const Var& v, const Array& g) {
  if (v.requires_grad()) v.get()->accumulate(g);
}

namespace {

enum class Bcast { Same, LeftScalar, RightScalar };

Bcast broadcast_kind(const Array& a, const Array& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::Same;
  if (b.is_scalar()) return Bcast::RightScalar;
  if (a.is_scalar()) return Bcast::LeftScalar;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
}

// Reduces a gradient of the broadcast result back onto an operand.
Array unbroadcast(const Array& g, const Array& operand) {
  if (g.size() == operand.size()) return g.reshaped(operand.shape());
  double s = 0.0;
  for (double v : g.vec()) s += v;
  return Array(operand.shape(), s);
}

template <class F>
Array binary_map(const Array& a, const Array& b, Bcast k, F f) {
  const Shape& shape = (k == Bcast::LeftScalar) ? b.shape() : a.shape();
  Array out(shape);
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = (k == Bcast::LeftScalar) ? a[0] : a[i];
    const double y = (k == Bcast::RightScalar) ? b[0] : b[i];
    out[i] = f(x, y);
  }
  return out;
}

template <class F>
Array unary_map(const Array& a, F f) {
  Array out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  const auto k = broadcast_kind(a.value(), b.value(), "add");
  Array out = binary_map(a.value(), b.value(), k, [](double x, double y) { return x + y; });
  return make_node(std::move(out), {a, b}, [a, b](const Array& g, const Array&) {
    if (a.requires_grad()) accumulate(a, unbroadcast(g, a.value()));
    if (b.requires_grad()) accumulate(b, unbroadcast(g, b.value()));
  });
}

Var sub(const Var& a, const Var& b) {
  const auto k = broadcast_kind(a.value(), b.value(), "sub");
  Array out = binary_map(a.value(), b.value(), k, [](double x, double y) { return x - y; });
  return make_node(std::move(out), {a, b}, [a, b](const Array& g, const Array&) {
    if (a.requires_grad()) accumulate(a, unbroadcast(g, a.value()));
    if (b.requires_grad()) {
      Array ng = unary_map(g, [](double v) { return -v; });
      accumulate(b, unbroadcast(ng, b.value()));
    }
  });
}

Var mul(const Var& a, const Var& b) {
  const auto k = broadcast_kind(a.value(), b.value(), "mul");
  Array out = binary_map(a.value(), b.value(), k, [](double x, double y) { return x * y; });
  return make_node(std::move(out), {a, b}, [a, b, k](const Array& g, const Array&) {
    const Array& av = a.value();
    const Array& bv = b.value();
    const std::size_t n = g.size();
    if (a.requires_grad()) {
      Array ga(g.shape());
      for (std::size_t i = 0; i < n; ++i) ga[i] = g[i] * (k == Bcast::RightScalar ? bv[0] : bv[i]);
      accumulate(a, unbroadcast(ga, av));
    }
    if (b.requires_grad()) {
      Array gb(g.shape());
      for (std::size_t i = 0; i < n; ++i) gb[i] = g[i] * (k == Bcast::LeftScalar ? av[0] : av[i]);
      accumulate(b, unbroadcast(gb, bv));
    }
  });
}

Var div(const Var& a, const Var& b) {
  const auto k = broadcast_kind(a.value(), b.value(), "div");
  Array out = binary_map(a.value(), b.value(), k, [](double x, double y) { return x / y; });
  return make_node(std::move(out), {a, b}, [a, b, k](const Array& g, const Array& o) {
    const Array& bv = b.value();
    const std::size_t n = g.size();
    if (a.requires_grad()) {
      Array ga(g.shape());
      for (std::size_t i = 0; i < n; ++i) ga[i] = g[i] / (k == Bcast::RightScalar ? bv[0] : bv[i]);
      accumulate(a, unbroadcast(ga, a.value()));
    }
    if (b.requires_grad()) {
      Array gb(g.shape());
      for (std::size_t i = 0; i < n; ++i) {
        const double y = (k == Bcast::RightScalar) ? bv[0] : bv[i];
        gb[i] = -g[i] * o[i] / y;
      }
      accumulate(b, unbroadcast(gb, bv));
    }
  });
}

Var add(const Var& a, double b) {
  Array out = unary_map(a.value(), [b](double x) { return x + b; });
  return make_node(std::move(out), {a}, [a](const Array& g, const Array&) { accumulate(a, g); });
}

Var mul(const Var& a, double b) {
  Array out = unary_map(a.value(), [b](double x) { return x * b; });
  return make_node(std::move(out), {a}, [a, b](const Array& g, const Array&) {
    accumulate(a, unary_map(g, [b](double v) { return v * b; }));
  });
}

Var exp(const Var& a) {
  Array out = unary_map(a.value(), [](double x) { return std::exp(x); });
  return make_node(std::move(out), {a}, [a](const Array& g, const Array& o) {
    Array ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * o[i];
    accumulate(a, ga);
  });
}

Var log(const Var& a) {
  const Array& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (!(av[i] > 0.0)) {
      throw DomainError("log of non-positive value " + std::to_string(av[i]) + " at index " +
                        std::to_string(i));
    }
  }
  Array out = unary_map(av, [](double x) { return std::log(x); });
  return make_node(std::move(out), {a}, [a](const Array& g, const Array&) {
    const Array& v = a.value();
    Array ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] / v[i];
    accumulate(a, ga);
  });
}

Var neg(const Var& a) { return mul(a, -1.0); }

Var max_with(const Var& a, double c) {
  Array out = unary_map(a.value(), [c](double x) { return std::max(x, c); });
  return make_node(std::move(out), {a}, [a, c](const Array& g, const Array&) {
    const Array& v = a.value();
    Array ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = v[i] >= c ? g[i] : 0.0;
    accumulate(a, ga);
  });
}

Var relu(const Var& a) { return max_with(a, 0.0); }

Var leaky_relu(const Var& a, double alpha) {
  Array out = unary_map(a.value(), [alpha](double x) { return x > 0.0 ? x : alpha * x; });
  return make_node(std::move(out), {a}, [a, alpha](const Array& g, const Array&) {
    const Array& v = a.value();
    Array ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = v[i] > 0.0 ? g[i] : alpha * g[i];
    accumulate(a, ga);
  });
}

Var sigmoid(const Var& a) {
  Array out = unary_map(a.value(), [](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  return make_node(std::move(out), {a}, [a](const Array& g, const Array& o) {
    Array ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * o[i] * (1.0 - o[i]);
    accumulate(a, ga);
  });
}

Var square(const Var& a) {
  Array out = unary_map(a.value(), [](double x) { return x * x; });
  return make_node(std::move(out), {a}, [a](const Array& g, const Array&) {
    const Array& v = a.value();
    Array ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = 2.0 * v[i] * g[i];
    accumulate(a, ga);
  });
}

// ---------------------------------------------------------------------------

namespace {

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
  Shape reduced;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError("reduction axis " + std::to_string(axis) + " invalid for shape " + shape_str(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) r.reduced.push_back(s[i]);
  if (r.len == 0) throw ShapeError("empty reduction axis");
  return r;
}

}  // namespace

Var reduce(Reduce kind, const Var& a, std::size_t axis) {
  if (kind == Reduce::Max) return max(a, axis).value;
  const AxisSplit sp = split_axis(a.shape(), axis);
  const Array& v = a.value();
  Array out(sp.reduced);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      double r = 0.0;
      if (kind == Reduce::LogSumExp) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < sp.len; ++k) m = std::max(m, v[base + k * sp.inner]);
        if (std::isinf(m)) {
          r = m;
        } else {
          double s = 0.0;
          for (std::size_t k = 0; k < sp.len; ++k) s += std::exp(v[base + k * sp.inner] - m);
          r = m + std::log(s);
        }
      } else {
        for (std::size_t k = 0; k < sp.len; ++k) r += v[base + k * sp.inner];
        if (kind == Reduce::Mean) r /= static_cast<double>(sp.len);
      }
      out[o * sp.inner + in] = r;
    }
  }
  return make_node(std::move(out), {a}, [a, sp, kind](const Array& g, const Array& o_val) {
    const Array& v = a.value();
    Array ga(v.shape());
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.len * sp.inner + in;
        const double go = g[o * sp.inner + in];
        const double ov = o_val[o * sp.inner + in];
        for (std::size_t k = 0; k < sp.len; ++k) {
          const std::size_t idx = base + k * sp.inner;
          switch (kind) {
            case Reduce::Sum: ga[idx] = go; break;
            case Reduce::Mean: ga[idx] = go / static_cast<double>(sp.len); break;
            case Reduce::LogSumExp: ga[idx] = std::isinf(ov) ? 0.0 : go * std::exp(v[idx] - ov); break;
            case Reduce::Max: break;
          }
        }
      }
    }
    accumulate(a, ga);
  });
}

Var sum(const Var& a, std::size_t axis) { return reduce(Reduce::Sum, a, axis); }
Var mean(const Var& a, std::size_t axis) { return reduce(Reduce::Mean, a, axis); }
Var logsumexp(const Var& a, std::size_t axis) { return reduce(Reduce::LogSumExp, a, axis); }

MaxResult max(const Var& a, std::size_t axis) {
  const AxisSplit sp = split_axis(a.shape(), axis);
  const Array& v = a.value();
  Array out(sp.reduced);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      std::size_t best = 0;
      for (std::size_t k = 1; k < sp.len; ++k)
        if (v[base + k * sp.inner] > v[base + best * sp.inner]) best = k;
      out[o * sp.inner + in] = v[base + best * sp.inner];
      arg[o * sp.inner + in] = best;
    }
  }
  Var node = make_node(std::move(out), {a}, [a, sp, arg](const Array& g, const Array&) {
    Array ga(a.value().shape());
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t j = o * sp.inner + in;
        ga[o * sp.len * sp.inner + arg[j] * sp.inner + in] = g[j];
      }
    accumulate(a, ga);
  });
  return {std::move(node), std::move(arg)};
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (double v : a.value().vec()) s += v;
  return make_node(Array::scalar(s), {a}, [a](const Array& g, const Array&) {
    accumulate(a, Array(a.value().shape(), g[0]));
  });
}

Var mean_all(const Var& a) {
  const double n = static_cast<double>(a.size());
  if (n == 0) throw ShapeError("mean of empty array");
  return mul(sum_all(a), 1.0 / n);
}

// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Array out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  }
  return make_node(std::move(out), {a, b}, [a, b, m, k, n](const Array& g, const Array&) {
    const Array& av = a.value();
    const Array& bv = b.value();
    if (a.requires_grad()) {
      Array ga(Shape{m, k});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* grow = g.data() + i * n;
          const double* brow = bv.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          ga[i * k + p] = s;
        }
      accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Array gb(Shape{k, n});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = av[i * k + p];
          if (x == 0.0) continue;
          const double* grow = g.data() + i * n;
          double* gbrow = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += x * grow[j];
        }
      accumulate(b, gb);
    }
  });
}

Var conv_transpose2d(const Var& x, const Var& k, std::size_t stride) {
  const Array& xv = x.value();
  const Array& kv = k.value();
  if (xv.rank() != 4 || kv.rank() != 4 || xv.dim(1) != kv.dim(0) || kv.dim(2) != kv.dim(3)) {
    throw ShapeError("conv_transpose2d: incompatible shapes " + shape_str(xv.shape()) + " and " +
                     shape_str(kv.shape()));
  }
  if (stride == 0) throw ShapeError("conv_transpose2d: stride must be positive");
  const std::size_t N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t Co = kv.dim(1), K = kv.dim(2);
  const std::size_t OH = (H - 1) * stride + K, OW = (W - 1) * stride + K;
  Array out(Shape{N, Co, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t ci = 0; ci < Ci; ++ci)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          const double xval = xv[((n * Ci + ci) * H + i) * W + j];
          if (xval == 0.0) continue;
          for (std::size_t co = 0; co < Co; ++co) {
            const double* kk = kv.data() + (ci * Co + co) * K * K;
            double* ob = out.data() + (n * Co + co) * OH * OW;
            for (std::size_t u = 0; u < K; ++u)
              for (std::size_t w = 0; w < K; ++w) ob[(i * stride + u) * OW + j * stride + w] += xval * kk[u * K + w];
          }
        }
  return make_node(std::move(out), {x, k},
                   [x, k, N, Ci, H, W, Co, K, OH, OW, stride](const Array& g, const Array&) {
                     const Array& xv = x.value();
                     const Array& kv = k.value();
                     Array gx(xv.shape());
                     Array gk(kv.shape());
                     for (std::size_t n = 0; n < N; ++n)
                       for (std::size_t ci = 0; ci < Ci; ++ci)
                         for (std::size_t i = 0; i < H; ++i)
                           for (std::size_t j = 0; j < W; ++j) {
                             const std::size_t xi = ((n * Ci + ci) * H + i) * W + j;
                             const double xval = xv[xi];
                             double acc = 0.0;
                             for (std::size_t co = 0; co < Co; ++co) {
                               const double* kk = kv.data() + (ci * Co + co) * K * K;
                               double* gkk = gk.data() + (ci * Co + co) * K * K;
                               const double* gb = g.data() + (n * Co + co) * OH * OW;
                               for (std::size_t u = 0; u < K; ++u)
                                 for (std::size_t w = 0; w < K; ++w) {
                                   const double gv = gb[(i * stride + u) * OW + j * stride + w];
                                   acc += gv * kk[u * K + w];
                                   gkk[u * K + w] += gv * xval;
                                 }
                             }
                             gx[xi] = acc;
                           }
                     accumulate(x, gx);
                     accumulate(k, gk);
                   });
}

// ---------------------------------------------------------------------------

Var reshape(const Var& a, Shape shape) {
  Array out = a.value().reshaped(std::move(shape));
  return make_node(std::move(out), {a}, [a](const Array& g, const Array&) {
    accumulate(a, g.reshaped(a.value().shape()));
  });
}

Var add_bias(const Var& a, const Var& bias) {
  const Array& av = a.value();
  const Array& bv = bias.value();
  if (av.rank() != 2 || bv.size() != av.dim(1)) {
    throw ShapeError("add_bias: shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  const std::size_t rows = av.dim(0), cols = av.dim(1);
  Array out = av;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  return make_node(std::move(out), {a, bias}, [a, bias, rows, cols](const Array& g, const Array&) {
    accumulate(a, g);
    if (bias.requires_grad()) {
      Array gb(bias.value().shape());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      accumulate(bias, gb);
    }
  });
}

Var add_channel_bias(const Var& a, const Var& bias) {
  const Array& av = a.value();
  const Array& bv = bias.value();
  if (av.rank() != 4 || bv.size() != av.dim(1)) {
    throw ShapeError("add_channel_bias: shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  }
  const std::size_t N = av.dim(0), C = av.dim(1), HW = av.dim(2) * av.dim(3);
  Array out = av;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) out[(n * C + c) * HW + i] += bv[c];
  return make_node(std::move(out), {a, bias}, [a, bias, N, C, HW](const Array& g, const Array&) {
    accumulate(a, g);
    if (bias.requires_grad()) {
      Array gb(bias.value().shape());
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < HW; ++i) gb[c] += g[(n * C + c) * HW + i];
      accumulate(bias, gb);
    }
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  const Array& av = a.value();
  if (av.rank() != 2 || begin > end || end > av.dim(1)) {
    throw ShapeError("slice_cols: bad range for shape " + shape_str(av.shape()));
  }
  const std::size_t rows = av.dim(0), cols = av.dim(1), w = end - begin;
  Array out(Shape{rows, w});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = av[r * cols + begin + c];
  return make_node(std::move(out), {a}, [a, rows, cols, begin, w](const Array& g, const Array&) {
    Array ga(a.value().shape());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) ga[r * cols + begin + c] = g[r * w + c];
    accumulate(a, ga);
  });
}

namespace {

std::pair<std::size_t, std::size_t> rows_cols(const Array& a, const char* op) {
  if (a.rank() == 1) return {1, a.dim(0)};
  if (a.rank() == 2) return {a.dim(0), a.dim(1)};
  throw ShapeError(std::string(op) + ": expected 1-D or 2-D input, got " + shape_str(a.shape()));
}

}  // namespace

Var log_softmax(const Var& a) {
  const auto [rows, cols] = rows_cols(a.value(), "log_softmax");
  if (cols == 0) throw ShapeError("log_softmax: empty axis");
  const Array& av = a.value();
  Array out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * cols;
    const double m = *std::max_element(x, x + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(x[c] - m);
    const double lse = m + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[c] - lse;
  }
  return make_node(std::move(out), {a}, [a, rows, cols](const Array& g, const Array& o) {
    Array ga(a.value().shape());
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c)
        ga[r * cols + c] = g[r * cols + c] - std::exp(o[r * cols + c]) * gs;
    }
    accumulate(a, ga);
  });
}

Var softmax(const Var& a) { return exp(log_softmax(a)); }

Var pick(const Var& a, std::span<const std::size_t> idx) {
  const Array& av = a.value();
  if (av.rank() != 2 || idx.size() != av.dim(0)) {
    throw ShapeError("pick: index count does not match rows of " + shape_str(av.shape()));
  }
  const std::size_t rows = av.dim(0), cols = av.dim(1);
  std::vector<std::size_t> ix(idx.begin(), idx.end());
  Array out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (ix[r] >= cols) throw ShapeError("pick: index out of range");
    out[r] = av[r * cols + ix[r]];
  }
  return make_node(std::move(out), {a}, [a, ix, cols](const Array& g, const Array&) {
    Array ga(a.value().shape());
    for (std::size_t r = 0; r < ix.size(); ++r) ga[r * cols + ix[r]] = g[r];
    accumulate(a, ga);
  });
}

Var detach(const Var& a) { return Var::leaf(a.value(), false); }

// ---------------------------------------------------------------------------

void backward(const Var& root) {
  if (!root.defined()) throw Error("backward on undefined Var");
  if (root.size() != 1) throw ShapeError("backward requires a scalar root, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<NodeImpl*> order;
  std::unordered_set<NodeImpl*> seen;
  std::vector<std::pair<NodeImpl*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeImpl* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (NodeImpl* n : order)
    if (!n->parents.empty() && n->grad_allocated) n->grad.fill(0.0);

  root.get()->accumulate(Array(root.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeImpl* n = *it;
    if (n->parents.empty() || !n->backward) continue;
    n->backward(n->grad_buffer(), n->value);
  }
}

void zero_grad(std::span<Var> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace apc::ag

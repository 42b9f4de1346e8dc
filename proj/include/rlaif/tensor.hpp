#pragma once

// Reverse-mode differentiation over dense row-major double arrays.
//
// A Tape records every primitive applied to its Vars together with a closure
// that propagates the output gradient to the inputs. Nodes are appended in
// evaluation order, so a single reverse sweep over node ids visits them in
// topological order. Gradients accumulate additively, which handles fan-out.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rlaif {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

class NDArray {
 public:
  NDArray() : shape_{1}, values_(1, 0.0) {}

  explicit NDArray(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    values_ = std::vector<double>(shape_size(shape_));
  }

  NDArray(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    validate_shape();
    if (values_.size() != shape_size(shape_)) {
      throw ShapeError("NDArray: shape " + shape_string(shape_) + " needs " +
                       std::to_string(shape_size(shape_)) + " values, got " + std::to_string(values_.size()));
    }
  }

  static NDArray scalar(double v) { return NDArray({1}, {v}); }
  static NDArray full(Shape shape, double v) {
    NDArray a(std::move(shape));
    std::fill(a.values_.begin(), a.values_.end(), v);
    return a;
  }
  static NDArray vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return NDArray({n}, std::move(v));
  }
  static NDArray matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return NDArray({rows, cols}, std::move(v));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  // Rank-1 arrays behave as a single row.
  std::size_t rows() const noexcept { return rank() == 1 ? 1 : shape_[0]; }
  std::size_t cols() const noexcept { return shape_.back(); }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  const double* data() const noexcept { return values_.data(); }
  double* data() noexcept { return values_.data(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar " + shape_string(shape_));
    return values_[0];
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const NDArray&, const NDArray&) = default;

 private:
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("NDArray: empty shape");
    for (auto d : shape_) {
      if (d == 0) throw ShapeError("NDArray: zero dimension in " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> values_;
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline ConstMatrixMap as_matrix(const NDArray& a) {
  return ConstMatrixMap(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}
inline MatrixMap as_matrix(NDArray& a) {
  return MatrixMap(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}

}  // namespace detail

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the Tape lives.
class Var {
 public:
  Var() = default;
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const NDArray& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Gradients produced by Tape::backward, indexed by node.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<std::optional<NDArray>> by_node) : by_node_(std::move(by_node)) {}

  bool contains(const Var& v) const { return v.id() < by_node_.size() && by_node_[v.id()].has_value(); }
  const NDArray& operator[](const Var& v) const {
    if (!contains(v)) throw std::out_of_range("no gradient recorded for node " + std::to_string(v.id()));
    return *by_node_[v.id()];
  }
  NDArray take(const Var& v) {
    if (!contains(v)) throw std::out_of_range("no gradient recorded for node " + std::to_string(v.id()));
    return std::move(*by_node_[v.id()]);
  }

 private:
  std::vector<std::optional<NDArray>> by_node_;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // With tracing disabled no backward closures are kept; backward() is then rejected.
  explicit Tape(bool tracing) : tracing_(tracing) {}

  bool tracing() const noexcept { return tracing_; }

  Var leaf(NDArray value) { return push(std::move(value), {}, nullptr, tracing_); }
  Var constant(NDArray value) { return push(std::move(value), {}, nullptr, false); }

  // Appends the result of a primitive. The closure is dropped when no input needs a gradient.
  Var record(NDArray value, std::vector<std::size_t> inputs, BackwardFn fn, const char* op) {
    if (!value.all_finite()) {
      throw NumericError(std::string(op) + ": non-finite output of shape " + shape_string(value.shape()));
    }
    bool needs = false;
    for (auto i : inputs) needs = needs || nodes_[i].requires_grad;
    if (!needs || !tracing_) return push(std::move(value), {}, nullptr, false);
    return push(std::move(value), std::move(inputs), std::move(fn), true);
  }

  const NDArray& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient buffer of a node during the backward sweep; zero-initialized on first touch.
  NDArray& grad_buffer(std::size_t id) {
    auto& g = grads_[id];
    if (!g) g.emplace(nodes_[id].value.shape());
    return *g;
  }

  Gradients backward(const Var& root) {
    if (root.tape_ != this) throw std::invalid_argument("backward: root belongs to another tape");
    if (!tracing_) throw std::logic_error("backward: tape was created with tracing disabled");
    if (nodes_[root.id_].value.size() != 1) {
      throw ShapeError("backward: root must be scalar, got " + shape_string(nodes_[root.id_].value.shape()));
    }
    grads_.assign(nodes_.size(), std::nullopt);
    grads_[root.id_].emplace(nodes_[root.id_].value.shape());
    (*grads_[root.id_])[0] = 1.0;
    for (std::size_t id = root.id_ + 1; id-- > 0;) {
      auto& node = nodes_[id];
      if (!grads_[id] || !node.backward) continue;
      node.backward(*this, id);
    }
    for (std::size_t id = 0; id <= root.id_; ++id) {
      auto& node = nodes_[id];
      if (node.requires_grad && node.inputs.empty() && !grads_[id]) grads_[id].emplace(node.value.shape());
      if (node.backward) grads_[id].reset();  // keep leaves only
    }
    return Gradients(std::exchange(grads_, {}));
  }

 private:
  friend class Var;

  struct Node {
    NDArray value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(NDArray value, std::vector<std::size_t> inputs, BackwardFn fn, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(fn), requires_grad});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::vector<std::optional<NDArray>> grads_;
  bool tracing_ = true;
};

inline const NDArray& Var::value() const { return tape_->value(id_); }

namespace detail {

inline void same_tape(const Var& a, const Var& b, const char* op) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

inline void require_matrix(const char* op, const NDArray& a) {
  if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
}

enum class Broadcast { same, row, scalar };

// b is broadcast onto a: identical shapes, a row vector over each row of a, or a single value.
inline Broadcast broadcast_kind(const char* op, const NDArray& a, const NDArray& b) {
  if (a.shape() == b.shape()) return Broadcast::same;
  if (b.rank() == 1 && a.rank() == 2 && b.size() == a.cols()) return Broadcast::row;
  if (b.size() == 1) return Broadcast::scalar;
  shape_mismatch(op, a.shape(), b.shape());
}

// Calls body(i, j) for every element i of a and its broadcast partner j in b.
template <typename Body>
inline void for_each_broadcast(Broadcast kind, std::size_t n, std::size_t cols, Body&& body) {
  switch (kind) {
    case Broadcast::same:
      for (std::size_t i = 0; i < n; ++i) body(i, i);
      return;
    case Broadcast::row:
      for (std::size_t r = 0, i = 0; i < n; ++r)
        for (std::size_t c = 0; c < cols; ++c, ++i) body(i, c);
      return;
    case Broadcast::scalar:
      for (std::size_t i = 0; i < n; ++i) body(i, std::size_t{0});
      return;
  }
}

// Elementwise map with derivative expressed through input x and output y.
template <typename F, typename D>
Var unary(const Var& a, const char* op, F f, D dfdx) {
  const NDArray& x = a.value();
  NDArray y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(y), {ia},
                         [ia, dfdx](Tape& t, std::size_t self) {
                           const NDArray& g = t.grad_buffer(self);
                           const NDArray& xv = t.value(ia);
                           const NDArray& yv = t.value(self);
                           NDArray& gx = t.grad_buffer(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xv[i], yv[i]);
                         },
                         op);
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  detail::same_tape(a, b, "matmul");
  const NDArray& av = a.value();
  const NDArray& bv = b.value();
  detail::require_matrix("matmul", av);
  detail::require_matrix("matmul", bv);
  if (av.cols() != bv.rows()) detail::shape_mismatch("matmul", av.shape(), bv.shape());
  NDArray out({av.rows(), bv.cols()});
  detail::as_matrix(out).noalias() = detail::as_matrix(av) * detail::as_matrix(bv);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib},
                         [ia, ib](Tape& t, std::size_t self) {
                           auto g = detail::as_matrix(t.grad_buffer(self));
                           if (t.requires_grad(ia)) {
                             detail::as_matrix(t.grad_buffer(ia)).noalias() +=
                                 g * detail::as_matrix(t.value(ib)).transpose();
                           }
                           if (t.requires_grad(ib)) {
                             detail::as_matrix(t.grad_buffer(ib)).noalias() +=
                                 detail::as_matrix(t.value(ia)).transpose() * g;
                           }
                         },
                         "matmul");
}

inline Var transpose(const Var& a) {
  const NDArray& av = a.value();
  detail::require_matrix("transpose", av);
  NDArray out({av.cols(), av.rows()});
  detail::as_matrix(out) = detail::as_matrix(av).transpose();
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia},
                         [ia](Tape& t, std::size_t self) {
                           detail::as_matrix(t.grad_buffer(ia)) += detail::as_matrix(t.grad_buffer(self)).transpose();
                         },
                         "transpose");
}

namespace detail {

template <typename F, typename Da, typename Db>
Var binary(const Var& a, const Var& b, const char* op, F f, Da dfda, Db dfdb) {
  same_tape(a, b, op);
  const NDArray& av = a.value();
  const NDArray& bv = b.value();
  const Broadcast kind = broadcast_kind(op, av, bv);
  const std::size_t cols = av.cols();
  NDArray out(av.shape());
  {
    double* o = out.data();
    const double* x = av.data();
    const double* y = bv.data();
    for_each_broadcast(kind, av.size(), cols, [&](std::size_t i, std::size_t j) { o[i] = f(x[i], y[j]); });
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib},
                         [ia, ib, kind, cols, dfda, dfdb](Tape& t, std::size_t self) {
                           const double* g = t.grad_buffer(self).data();
                           const double* x = t.value(ia).data();
                           const double* y = t.value(ib).data();
                           const std::size_t n = t.value(self).size();
                           if (t.requires_grad(ia)) {
                             double* gx = t.grad_buffer(ia).data();
                             for_each_broadcast(kind, n, cols,
                                                [&](std::size_t i, std::size_t j) { gx[i] += g[i] * dfda(x[i], y[j]); });
                           }
                           if (t.requires_grad(ib)) {
                             double* gy = t.grad_buffer(ib).data();
                             for_each_broadcast(kind, n, cols,
                                                [&](std::size_t i, std::size_t j) { gy[j] += g[i] * dfdb(x[i], y[j]); });
                           }
                         },
                         op);
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

// Elementwise minimum; at ties the gradient flows to the first operand.
inline Var minimum(const Var& a, const Var& b) {
  return detail::binary(
      a, b, "minimum", [](double x, double y) { return std::min(x, y); },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; }, [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

inline Var scale(const Var& a, double c) {
  return detail::unary(
      a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var shift(const Var& a, double c) {
  return detail::unary(
      a, "shift", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var exp(const Var& a) {
  return detail::unary(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  return detail::unary(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

// log(sigmoid(x)) without underflow for large negative x.
inline Var log_sigmoid(const Var& a) {
  return detail::unary(
      a, "log_sigmoid", [](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) {
        // d/dx log sigmoid(x) = sigmoid(-x)
        if (x >= 0) {
          const double e = std::exp(-x);
          return e / (1.0 + e);
        }
        return 1.0 / (1.0 + std::exp(x));
      });
}

// tanh-approximated GELU, the project-wide nonlinearity.
inline Var gelu(const Var& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  const NDArray& x = a.value();
  NDArray y(x.shape());
  std::vector<double> th(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    th[i] = std::tanh(k * (v + c * v * v * v));
    y[i] = 0.5 * v * (1.0 + th[i]);
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(y), {ia},
                         [ia, th = std::move(th)](Tape& t, std::size_t self) {
                           const double* g = t.grad_buffer(self).data();
                           const double* xv = t.value(ia).data();
                           double* gx = t.grad_buffer(ia).data();
                           for (std::size_t i = 0; i < th.size(); ++i) {
                             const double v = xv[i];
                             const double d = 0.5 * (1.0 + th[i]) + 0.5 * v * (1.0 - th[i] * th[i]) * k * (1.0 + 3.0 * c * v * v);
                             gx[i] += g[i] * d;
                           }
                         },
                         "gelu");
}

// Clamp with the gradient passed through on [lo, hi].
inline Var clamp(const Var& a, double lo, double hi) {
  return detail::unary(
      a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Var sum(const Var& a) {
  const NDArray& av = a.value();
  double s = 0.0;
  for (double v : av.values()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(NDArray::scalar(s), {ia},
                         [ia](Tape& t, std::size_t self) {
                           const double g = t.grad_buffer(self)[0];
                           for (double& v : t.grad_buffer(ia).values()) v += g;
                         },
                         "sum");
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var reshape(const Var& a, Shape shape) {
  const NDArray& av = a.value();
  if (shape_size(shape) != av.size()) detail::shape_mismatch("reshape", av.shape(), shape);
  NDArray out(std::move(shape), std::vector<double>(av.values().begin(), av.values().end()));
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia},
                         [ia](Tape& t, std::size_t self) {
                           const NDArray& g = t.grad_buffer(self);
                           NDArray& gx = t.grad_buffer(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                         },
                         "reshape");
}

inline Var row_softmax(const Var& a) {
  const NDArray& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  NDArray y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = y.data() + r * cols;
    const double m = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (yr[c] = std::exp(xr[c] - m));
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= z;
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(y), {ia},
                         [ia, rows, cols](Tape& t, std::size_t self) {
                           const NDArray& g = t.grad_buffer(self);
                           const NDArray& yv = t.value(self);
                           NDArray& gx = t.grad_buffer(ia);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const std::size_t o = r * cols;
                             double dot = 0.0;
                             for (std::size_t c = 0; c < cols; ++c) dot += g[o + c] * yv[o + c];
                             for (std::size_t c = 0; c < cols; ++c) gx[o + c] += yv[o + c] * (g[o + c] - dot);
                           }
                         },
                         "row_softmax");
}

inline Var row_log_softmax(const Var& a) {
  const NDArray& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  NDArray y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = y.data() + r * cols;
    const double m = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - m);
    const double lz = m + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) yr[c] = xr[c] - lz;
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(y), {ia},
                         [ia, rows, cols](Tape& t, std::size_t self) {
                           const NDArray& g = t.grad_buffer(self);
                           const NDArray& yv = t.value(self);
                           NDArray& gx = t.grad_buffer(ia);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const std::size_t o = r * cols;
                             double gs = 0.0;
                             for (std::size_t c = 0; c < cols; ++c) gs += g[o + c];
                             for (std::size_t c = 0; c < cols; ++c) gx[o + c] += g[o + c] - std::exp(yv[o + c]) * gs;
                           }
                         },
                         "row_log_softmax");
}

// Per-row standardization (no affine part): (x - mean) / sqrt(var + eps).
inline Var layer_norm(const Var& a, double eps = 1e-5) {
  const NDArray& x = a.value();
  const std::size_t rows = x.rows(), cols = x.cols();
  NDArray y(x.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = (xr[c] - mu) * inv_std[r];
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(y), {ia},
                         [ia, rows, cols, inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                           const NDArray& g = t.grad_buffer(self);
                           const NDArray& yv = t.value(self);
                           NDArray& gx = t.grad_buffer(ia);
                           const double n = static_cast<double>(cols);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const std::size_t o = r * cols;
                             double gm = 0.0, gy = 0.0;
                             for (std::size_t c = 0; c < cols; ++c) {
                               gm += g[o + c];
                               gy += g[o + c] * yv[o + c];
                             }
                             gm /= n;
                             gy /= n;
                             for (std::size_t c = 0; c < cols; ++c) {
                               gx[o + c] += inv_std[r] * (g[o + c] - gm - yv[o + c] * gy);
                             }
                           }
                         },
                         "layer_norm");
}

// Rows of `table` selected by `ids`.
inline Var embedding(const Var& table, std::span<const int> ids) {
  const NDArray& tv = table.value();
  detail::require_matrix("embedding", tv);
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  const std::size_t width = tv.cols();
  NDArray out({ids.size(), width});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside table " +
                              shape_string(tv.shape()));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * width, width, out.data() + i * width);
  }
  const std::size_t it = table.id();
  return table.tape().record(std::move(out), {it},
                             [it, width, idv = std::vector<int>(ids.begin(), ids.end())](Tape& t, std::size_t self) {
                               const NDArray& g = t.grad_buffer(self);
                               NDArray& gt = t.grad_buffer(it);
                               for (std::size_t i = 0; i < idv.size(); ++i) {
                                 double* dst = gt.data() + static_cast<std::size_t>(idv[i]) * width;
                                 const double* src = g.data() + i * width;
                                 for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
                               }
                             },
                             "embedding");
}

// out[i] = a[i, index[i]]
inline Var gather(const Var& a, std::span<const std::size_t> index) {
  const NDArray& av = a.value();
  if (index.size() != av.rows()) {
    throw ShapeError("gather: " + std::to_string(index.size()) + " indices for " + shape_string(av.shape()));
  }
  const std::size_t cols = av.cols();
  NDArray out({index.size()});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= cols) throw std::out_of_range("gather: index " + std::to_string(index[r]) + " >= " +
                                                  std::to_string(cols));
    out[r] = av[r * cols + index[r]];
  }
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia},
                         [ia, cols, idx = std::vector<std::size_t>(index.begin(), index.end())](Tape& t,
                                                                                                std::size_t self) {
                           const NDArray& g = t.grad_buffer(self);
                           NDArray& gx = t.grad_buffer(ia);
                           for (std::size_t r = 0; r < idx.size(); ++r) gx[r * cols + idx[r]] += g[r];
                         },
                         "gather");
}

// Entries strictly above the diagonal are replaced by `fill` (finite, very negative).
inline Var causal_mask_fill(const Var& a, double fill = -1e9) {
  const NDArray& av = a.value();
  detail::require_matrix("causal_mask_fill", av);
  if (av.rows() != av.cols()) throw ShapeError("causal_mask_fill: expected square, got " + shape_string(av.shape()));
  const std::size_t n = av.rows();
  NDArray out = av;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = r + 1; c < n; ++c) out[r * n + c] = fill;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia},
                         [ia, n](Tape& t, std::size_t self) {
                           const NDArray& g = t.grad_buffer(self);
                           NDArray& gx = t.grad_buffer(ia);
                           for (std::size_t r = 0; r < n; ++r)
                             for (std::size_t c = 0; c <= r; ++c) gx[r * n + c] += g[r * n + c];
                         },
                         "causal_mask_fill");
}

inline Var slice_cols(const Var& a, std::size_t start, std::size_t count) {
  const NDArray& av = a.value();
  detail::require_matrix("slice_cols", av);
  if (count == 0 || start + count > av.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) + ") outside " +
                     shape_string(av.shape()));
  }
  const std::size_t rows = av.rows(), cols = av.cols();
  NDArray out({rows, count});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(av.data() + r * cols + start, count, out.data() + r * count);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia},
                         [ia, rows, cols, start, count](Tape& t, std::size_t self) {
                           const NDArray& g = t.grad_buffer(self);
                           NDArray& gx = t.grad_buffer(ia);
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t c = 0; c < count; ++c) gx[r * cols + start + c] += g[r * count + c];
                         },
                         "slice_cols");
}

inline Var slice_rows(const Var& a, std::size_t start, std::size_t count) {
  const NDArray& av = a.value();
  detail::require_matrix("slice_rows", av);
  if (count == 0 || start + count > av.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) + ") outside " +
                     shape_string(av.shape()));
  }
  const std::size_t cols = av.cols();
  NDArray out({count, cols}, std::vector<double>(av.data() + start * cols, av.data() + (start + count) * cols));
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia},
                         [ia, cols, start](Tape& t, std::size_t self) {
                           const NDArray& g = t.grad_buffer(self);
                           NDArray& gx = t.grad_buffer(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[start * cols + i] += g[i];
                         },
                         "slice_rows");
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids, widths;
  for (const auto& p : parts) {
    detail::require_matrix("concat_cols", p.value());
    detail::same_tape(parts[0], p, "concat_cols");
    if (p.value().rows() != rows) detail::shape_mismatch("concat_cols", parts[0].shape(), p.shape());
    ids.push_back(p.id());
    widths.push_back(p.value().cols());
    cols += p.value().cols();
  }
  NDArray out({rows, cols});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const NDArray& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(pv.data() + r * pv.cols(), pv.cols(), out.data() + r * cols + offset);
    offset += pv.cols();
  }
  return parts[0].tape().record(std::move(out), ids,
                                [ids, widths, rows, cols](Tape& t, std::size_t self) {
                                  const NDArray& g = t.grad_buffer(self);
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < ids.size(); ++k) {
                                    if (t.requires_grad(ids[k])) {
                                      NDArray& gx = t.grad_buffer(ids[k]);
                                      for (std::size_t r = 0; r < rows; ++r)
                                        for (std::size_t c = 0; c < widths[k]; ++c)
                                          gx[r * widths[k] + c] += g[r * cols + off + c];
                                    }
                                    off += widths[k];
                                  }
                                },
                                "concat_cols");
}

// Column means of a matrix, as a vector.
inline Var mean_rows(const Var& a) {
  const NDArray& av = a.value();
  detail::require_matrix("mean_rows", av);
  const std::size_t rows = av.rows(), cols = av.cols();
  NDArray out({cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += av[r * cols + c];
  for (std::size_t c = 0; c < cols; ++c) out[c] /= static_cast<double>(rows);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {ia},
                         [ia, rows, cols](Tape& t, std::size_t self) {
                           const NDArray& g = t.grad_buffer(self);
                           NDArray& gx = t.grad_buffer(ia);
                           const double inv = 1.0 / static_cast<double>(rows);
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += g[c] * inv;
                         },
                         "mean_rows");
}

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// `fn` must build a scalar from the given leaves using tape primitives only.
using ScalarFunction = std::function<Var(Tape&, std::span<const Var>)>;

inline double grad_check(const ScalarFunction& fn, std::vector<NDArray> points, double step = 1e-6) {
  if (!(step > 0)) throw std::invalid_argument("grad_check: step must be positive");
  std::vector<NDArray> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : points) leaves.push_back(tape.leaf(p));
    Var out = fn(tape, leaves);
    auto grads = tape.backward(out);
    for (const auto& l : leaves) analytic.push_back(grads[l]);
  }
  auto evaluate = [&]() {
    Tape tape(false);
    std::vector<Var> leaves;
    for (const auto& p : points) leaves.push_back(tape.leaf(p));
    return fn(tape, leaves).value().item();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < points.size(); ++k) {
    for (std::size_t i = 0; i < points[k].size(); ++i) {
      const double saved = points[k][i];
      points[k][i] = saved + step;
      const double up = evaluate();
      points[k][i] = saved - step;
      const double down = evaluate();
      points[k][i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

inline double grad_check(const std::function<Var(Tape&, const Var&)>& fn, NDArray point, double step = 1e-6) {
  std::vector<NDArray> pts;
  pts.push_back(std::move(point));
  return grad_check([&](Tape& t, std::span<const Var> v) { return fn(t, v[0]); }, std::move(pts), step);
}

}  // namespace rlaif

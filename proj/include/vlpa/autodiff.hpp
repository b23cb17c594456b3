#pragma once

// Reverse-mode automatic differentiation over dense Tensors.
//
// A Tape records every primitive applied to its Vars in execution order, so
// the recording order is already a topological order. Tape::backward walks
// the records once in reverse. Tapes are single-use: build one per loss
// evaluation, read the leaf gradients, then drop it. Values and gradients
// stay readable until the Tape is destroyed or reset().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "vlpa/error.hpp"
#include "vlpa/tensor.hpp"

namespace vlpa {

class Tape;

// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
  bool requires_grad() const;
  // Gradient buffer; empty when nothing flowed into this node.
  const std::vector<double>& grad() const;
  // Gradient as a Tensor of the value's shape (zeros when absent).
  Tensor grad_tensor() const;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::span<const double> grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input.
  Var leaf(Tensor value, bool requires_grad = true) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.op = "leaf";
    return push(std::move(n));
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Constant that references caller-owned storage; `value` must outlive the tape.
  Var borrow(const Tensor& value) {
    Node n;
    n.borrowed = &value;
    n.op = "borrow";
    return push(std::move(n));
  }

  Var record(const char* op, Tensor out, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(op, std::move(out), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(fn));
  }

  Var record(const char* op, Tensor out, std::span<const Var> inputs, BackwardFn fn) {
    Node n;
    n.value = std::move(out);
    n.op = op;
    for (const Var& v : inputs) {
      if (v.tape_ != this) throw UsageError(std::string(op) + ": input belongs to another tape");
      n.requires_grad = n.requires_grad || nodes_[v.id_].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  // Attaches a backward closure to an already recorded node. Used by
  // primitives whose gradient reads their own output.
  void set_backward(const Var& v, BackwardFn fn) {
    Node& n = nodes_[v.id_];
    if (n.requires_grad) n.backward = std::move(fn);
  }

  // Populates d(loss)/d(node) for every node that requires a gradient.
  void backward(const Var& loss) {
    if (loss.tape_ != this) throw UsageError("backward: loss belongs to another tape");
    const Tensor& lv = value(loss.id_);
    if (lv.rank() != 1 || lv.size() != 1)
      throw UsageError("backward: loss must have shape [1], got " + shape_str(lv.shape()));
    if (differentiated_) throw UsageError("backward: tape already differentiated; record a new tape");
    differentiated_ = true;
    if (!nodes_[loss.id_].requires_grad) return;
    gacc(loss.id_)[0] += 1.0;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  void reset() {
    nodes_.clear();
    differentiated_ = false;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::string_view op_name(std::size_t id) const { return nodes_.at(id).op; }

  // Accessors used by primitives.
  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.borrowed ? *n.borrowed : n.value;
  }
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<double>& grad(std::size_t id) const { return nodes_[id].grad; }

  // Gradient accumulator for node `id`, allocated as zeros on first use.
  std::span<double> gacc(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(id).size(), 0.0);
    return n.grad;
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* borrowed = nullptr;
    bool requires_grad = false;
    std::vector<double> grad;
    BackwardFn backward;
    const char* op = "";
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  bool differentiated_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }
inline const std::vector<double>& Var::grad() const { return tape_->grad(id_); }
inline Tensor Var::grad_tensor() const {
  const auto& g = grad();
  if (g.empty()) return Tensor(shape(), 0.0);
  return Tensor(shape(), g);
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

namespace detail {

enum class Broadcast { kSame, kRow, kScalar };

inline Broadcast broadcast_mode(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.size() == 1) return Broadcast::kScalar;
  if (b.rank() == 1 && b.size() == a.shape().back()) return Broadcast::kRow;
  throw ConfigError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                    shape_str(b.shape()) + " do not conform");
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMajor>;
using ConstMatMap = Eigen::Map<const RowMajor>;

inline std::size_t bindex(Broadcast m, std::size_t i, std::size_t bsize) {
  switch (m) {
    case Broadcast::kSame: return i;
    case Broadcast::kRow: return i % bsize;
    case Broadcast::kScalar: return 0;
  }
  return 0;
}

inline void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank)
    throw ConfigError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                      shape_str(t.shape()));
}

// Splits a shape around `axis` into (outer, length, inner) strides.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const char* op, const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw ConfigError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                      shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  if (out.empty()) out.push_back(1);
  return out;
}

template <class F, class D>
Var unary(const char* op, const Var& a, F&& f, D dfdx) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  Tape& t = *a.tape();
  std::size_t ai = a.id();
  Var res = t.record(op, std::move(out), {a}, {});
  std::size_t oi = res.id();
  t.set_backward(res, [ai, oi, dfdx = std::move(dfdx)](Tape& tp, std::span<const double> g) {
    const Tensor& x = tp.value(ai);
    const Tensor& y = tp.value(oi);
    auto ga = tp.gacc(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
  });
  return res;
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  auto mode = detail::broadcast_mode("add", av, bv);
  Tensor out(av.shape());
  const std::size_t bs = bv.size();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[detail::bindex(mode, i, bs)];
  std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record("add", std::move(out), {a, b},
                          [ai, bi, mode, bs](Tape& t, std::span<const double> g) {
                            if (t.needs_grad(ai)) {
                              auto ga = t.gacc(ai);
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                            }
                            if (t.needs_grad(bi)) {
                              auto gb = t.gacc(bi);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                gb[detail::bindex(mode, i, bs)] += g[i];
                            }
                          });
}

inline Var sub(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  auto mode = detail::broadcast_mode("sub", av, bv);
  Tensor out(av.shape());
  const std::size_t bs = bv.size();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[detail::bindex(mode, i, bs)];
  std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record("sub", std::move(out), {a, b},
                          [ai, bi, mode, bs](Tape& t, std::span<const double> g) {
                            if (t.needs_grad(ai)) {
                              auto ga = t.gacc(ai);
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                            }
                            if (t.needs_grad(bi)) {
                              auto gb = t.gacc(bi);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                gb[detail::bindex(mode, i, bs)] -= g[i];
                            }
                          });
}

inline Var mul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  auto mode = detail::broadcast_mode("mul", av, bv);
  Tensor out(av.shape());
  const std::size_t bs = bv.size();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[detail::bindex(mode, i, bs)];
  std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record("mul", std::move(out), {a, b},
                          [ai, bi, mode, bs](Tape& t, std::span<const double> g) {
                            const Tensor& av = t.value(ai);
                            const Tensor& bv = t.value(bi);
                            if (t.needs_grad(ai)) {
                              auto ga = t.gacc(ai);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                ga[i] += g[i] * bv[detail::bindex(mode, i, bs)];
                            }
                            if (t.needs_grad(bi)) {
                              auto gb = t.gacc(bi);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                gb[detail::bindex(mode, i, bs)] += g[i] * av[i];
                            }
                          });
}

inline Var scale(const Var& a, double s) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
  std::size_t ai = a.id();
  return a.tape()->record("scale", std::move(out), {a}, [ai, s](Tape& t, std::span<const double> g) {
    auto ga = t.gacc(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

inline Var shift(const Var& a, double c) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + c;
  std::size_t ai = a.id();
  return a.tape()->record("shift", std::move(out), {a}, [ai](Tape& t, std::span<const double> g) {
    auto ga = t.gacc(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

inline Var exp(const Var& a) {
  return detail::unary("exp", a, [](double x) { return std::exp(x); },
                       [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  for (double v : a.value().values())
    if (!(v > 0.0)) throw NumericError("log: non-positive input " + std::to_string(v));
  return detail::unary("log", a, [](double x) { return std::log(x); },
                       [](double x, double) { return 1.0 / x; });
}

inline Var tanh(const Var& a) {
  return detail::unary("tanh", a, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(const Var& a) {
  return detail::unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// Elementwise clamp; gradient passes only where lo <= x <= hi.
inline Var clamp(const Var& a, double lo, double hi) {
  return detail::unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                       [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// Forward value `forward`, identity gradient (straight-through estimator).
inline Var straight_through(const Var& a, Tensor forward) {
  if (forward.shape() != a.shape())
    throw ConfigError("straight_through: shapes " + shape_str(a.shape()) + " and " +
                      shape_str(forward.shape()) + " do not conform");
  std::size_t ai = a.id();
  return a.tape()->record("straight_through", std::move(forward), {a},
                          [ai](Tape& t, std::span<const double> g) {
                            auto ga = t.gacc(ai);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          });
}

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank("matmul", av, 2);
  detail::require_rank("matmul", bv, 2);
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k)
    throw ConfigError("matmul: shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()) +
                      " do not conform");
  Tensor out(Shape{m, n});
  detail::MatMap(out.data().data(), m, n).noalias() =
      detail::ConstMatMap(av.data().data(), m, k) * detail::ConstMatMap(bv.data().data(), k, n);
  std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record("matmul", std::move(out), {a, b},
                          [ai, bi, m, k, n](Tape& t, std::span<const double> g) {
                            detail::ConstMatMap G(g.data(), m, n);
                            if (t.needs_grad(ai))
                              detail::MatMap(t.gacc(ai).data(), m, k).noalias() +=
                                  G * detail::ConstMatMap(t.value(bi).data().data(), k, n).transpose();
                            if (t.needs_grad(bi))
                              detail::MatMap(t.gacc(bi).data(), k, n).noalias() +=
                                  detail::ConstMatMap(t.value(ai).data().data(), m, k).transpose() * G;
                          });
}

inline Var transpose(const Var& a) {
  const Tensor& av = a.value();
  detail::require_rank("transpose", av, 2);
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  std::size_t ai = a.id();
  return a.tape()->record("transpose", std::move(out), {a},
                          [ai, r, c](Tape& t, std::span<const double> g) {
                            auto ga = t.gacc(ai);
                            for (std::size_t i = 0; i < r; ++i)
                              for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
                          });
}

// Softmax over the last axis.
inline Var softmax(const Var& a) {
  const Tensor& av = a.value();
  const std::size_t n = av.shape().back(), rows = av.size() / n;
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data().data() + r * n;
    double* y = out.data().data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= s;
  }
  std::size_t ai = a.id();
  Var res = a.tape()->record("softmax", std::move(out), {a}, {});
  std::size_t oi = res.id();
  a.tape()->set_backward(res,
                   [ai, oi, n, rows](Tape& t, std::span<const double> g) {
                     const Tensor& y = t.value(oi);
                     auto ga = t.gacc(ai);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double dot = 0.0;
                       for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
                       for (std::size_t j = 0; j < n; ++j)
                         ga[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
                     }
                   });
  return res;
}

// Log-softmax over the last axis.
inline Var log_softmax(const Var& a) {
  const Tensor& av = a.value();
  const std::size_t n = av.shape().back(), rows = av.size() / n;
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data().data() + r * n;
    double* y = out.data().data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) y[j] = x[j] - lse;
  }
  std::size_t ai = a.id();
  Var res = a.tape()->record("log_softmax", std::move(out), {a}, {});
  std::size_t oi = res.id();
  a.tape()->set_backward(res,
                   [ai, oi, n, rows](Tape& t, std::span<const double> g) {
                     const Tensor& y = t.value(oi);
                     auto ga = t.gacc(ai);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double gs = 0.0;
                       for (std::size_t j = 0; j < n; ++j) gs += g[r * n + j];
                       for (std::size_t j = 0; j < n; ++j)
                         ga[r * n + j] += g[r * n + j] - std::exp(y[r * n + j]) * gs;
                     }
                   });
  return res;
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  std::size_t ai = a.id();
  return a.tape()->record("sum", Tensor::scalar(s), {a}, [ai](Tape& t, std::span<const double> g) {
    auto ga = t.gacc(ai);
    for (double& v : ga) v += g[0];
  });
}

inline Var mean(const Var& a) {
  const std::size_t n = a.size();
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  std::size_t ai = a.id();
  return a.tape()->record("mean", Tensor::scalar(s / static_cast<double>(n)), {a},
                          [ai, n](Tape& t, std::span<const double> g) {
                            auto ga = t.gacc(ai);
                            const double d = g[0] / static_cast<double>(n);
                            for (double& v : ga) v += d;
                          });
}

inline Var sum_axis(const Var& a, std::size_t axis, double scale_by = 1.0, const char* op = "sum_axis") {
  const Tensor& av = a.value();
  auto sp = detail::split_axis(op, av.shape(), axis);
  Tensor out(detail::drop_axis(av.shape(), axis));
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < sp.len; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += av[(o * sp.len + l) * sp.inner + i];
  if (scale_by != 1.0)
    for (double& v : out.data()) v *= scale_by;
  std::size_t ai = a.id();
  return a.tape()->record(op, std::move(out), {a}, [ai, sp, scale_by](Tape& t, std::span<const double> g) {
    auto ga = t.gacc(ai);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t l = 0; l < sp.len; ++l)
        for (std::size_t i = 0; i < sp.inner; ++i)
          ga[(o * sp.len + l) * sp.inner + i] += g[o * sp.inner + i] * scale_by;
  });
}

inline Var mean_axis(const Var& a, std::size_t axis) {
  const auto len = detail::split_axis("mean_axis", a.shape(), axis).len;
  return sum_axis(a, axis, 1.0 / static_cast<double>(len), "mean_axis");
}

// Maximum along `axis`; the gradient flows to the first maximizer.
inline Var max_axis(const Var& a, std::size_t axis) {
  const Tensor& av = a.value();
  auto sp = detail::split_axis("max_axis", av.shape(), axis);
  Tensor out(detail::drop_axis(av.shape(), axis));
  std::vector<std::size_t> arg(out.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = o * sp.len * sp.inner + i;
      for (std::size_t l = 1; l < sp.len; ++l) {
        std::size_t idx = (o * sp.len + l) * sp.inner + i;
        if (av[idx] > av[best]) best = idx;
      }
      out[o * sp.inner + i] = av[best];
      arg[o * sp.inner + i] = best;
    }
  std::size_t ai = a.id();
  return a.tape()->record("max_axis", std::move(out), {a},
                          [ai, arg = std::move(arg)](Tape& t, std::span<const double> g) {
                            auto ga = t.gacc(ai);
                            for (std::size_t j = 0; j < g.size(); ++j) ga[arg[j]] += g[j];
                          });
}

inline constexpr double kNormFloor = 1e-12;

// Rows of the last axis scaled to unit L2 norm; norms below 1e-12 are floored.
inline Var l2_normalize(const Var& a) {
  const Tensor& av = a.value();
  const std::size_t n = av.shape().back(), rows = av.size() / n;
  Tensor out(av.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += av[r * n + j] * av[r * n + j];
    norms[r] = std::max(std::sqrt(s), kNormFloor);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = av[r * n + j] / norms[r];
  }
  Tape& tp = *a.tape();
  std::size_t ai = a.id();
  Var res = tp.record("l2_normalize", std::move(out), {a}, {});
  std::size_t oi = res.id();
  tp.set_backward(res,
                   [ai, oi, n, rows, norms = std::move(norms)](Tape& t, std::span<const double> g) {
                     const Tensor& y = t.value(oi);
                     auto ga = t.gacc(ai);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const bool floored = norms[r] <= kNormFloor;
                       double dot = 0.0;
                       if (!floored)
                         for (std::size_t j = 0; j < n; ++j) dot += y[r * n + j] * g[r * n + j];
                       for (std::size_t j = 0; j < n; ++j)
                         ga[r * n + j] += (g[r * n + j] - y[r * n + j] * dot) / norms[r];
                     }
                   });
  return res;
}

// Cosine similarity along the last axis; rank-1 inputs give shape [1].
inline Var cosine_similarity(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape())
    throw ConfigError("cosine_similarity: shapes " + shape_str(av.shape()) + " and " +
                      shape_str(bv.shape()) + " do not conform");
  const std::size_t n = av.shape().back(), rows = av.size() / n;
  Shape os(av.shape().begin(), av.shape().end() - 1);
  if (os.empty()) os.push_back(1);
  Tensor out(os);
  std::vector<double> na(rows), nb(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double sa = 0, sb = 0, d = 0;
    for (std::size_t j = 0; j < n; ++j) {
      sa += av[r * n + j] * av[r * n + j];
      sb += bv[r * n + j] * bv[r * n + j];
      d += av[r * n + j] * bv[r * n + j];
    }
    na[r] = std::max(std::sqrt(sa), kNormFloor);
    nb[r] = std::max(std::sqrt(sb), kNormFloor);
    out[r] = d / (na[r] * nb[r]);
  }
  std::size_t ai = a.id(), bi = b.id();
  Tape& tp = *a.tape();
  Var res = tp.record("cosine_similarity", std::move(out), {a, b}, {});
  std::size_t oi = res.id();
  tp.set_backward(
      res,
      [ai, bi, oi, n, rows, na = std::move(na), nb = std::move(nb)](Tape& t, std::span<const double> g) {
        const Tensor& av = t.value(ai);
        const Tensor& bv = t.value(bi);
        const Tensor& c = t.value(oi);
        const bool need_a = t.needs_grad(ai), need_b = t.needs_grad(bi);
        for (std::size_t r = 0; r < rows; ++r) {
          const double inv = 1.0 / (na[r] * nb[r]);
          if (need_a) {
            auto ga = t.gacc(ai);
            const double ka = na[r] > kNormFloor ? c[r] / (na[r] * na[r]) : 0.0;
            for (std::size_t j = 0; j < n; ++j)
              ga[r * n + j] += g[r] * (bv[r * n + j] * inv - ka * av[r * n + j]);
          }
          if (need_b) {
            auto gb = t.gacc(bi);
            const double kb = nb[r] > kNormFloor ? c[r] / (nb[r] * nb[r]) : 0.0;
            for (std::size_t j = 0; j < n; ++j)
              gb[r * n + j] += g[r] * (av[r * n + j] * inv - kb * bv[r * n + j]);
          }
        }
      });
  return res;
}

// Concatenation along axis 0; trailing dimensions must agree.
inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ConfigError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  Shape tail(s0.begin() + 1, s0.end());
  std::size_t rows = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (Shape(s.begin() + 1, s.end()) != tail)
      throw ConfigError("concat: shapes " + shape_str(s0) + " and " + shape_str(s) +
                        " do not conform");
    rows += s[0];
  }
  Shape os = s0;
  os[0] = rows;
  Tensor out(os);
  std::vector<std::size_t> offsets, ids;
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + off);
    offsets.push_back(off);
    ids.push_back(p.id());
    off += p.size();
  }
  return parts[0].tape()->record("concat", std::move(out), parts,
                                 [offsets, ids](Tape& t, std::span<const double> g) {
                                   for (std::size_t k = 0; k < ids.size(); ++k) {
                                     if (!t.needs_grad(ids[k])) continue;
                                     auto ga = t.gacc(ids[k]);
                                     for (std::size_t i = 0; i < ga.size(); ++i)
                                       ga[i] += g[offsets[k] + i];
                                   }
                                 });
}

inline Var concat(std::initializer_list<Var> parts) {
  return concat(std::span<const Var>(parts.begin(), parts.size()));
}

// Half-open range [begin, end) along `axis`.
inline Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  auto sp = detail::split_axis("slice", av.shape(), axis);
  if (begin >= end || end > sp.len)
    throw ConfigError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                      ") invalid for " + shape_str(av.shape()));
  Shape os = av.shape();
  os[axis] = end - begin;
  Tensor out(os);
  const std::size_t w = end - begin;
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t l = 0; l < w; ++l)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[(o * w + l) * sp.inner + i] = av[(o * sp.len + begin + l) * sp.inner + i];
  std::size_t ai = a.id();
  return a.tape()->record("slice", std::move(out), {a},
                          [ai, sp, begin, w](Tape& t, std::span<const double> g) {
                            auto ga = t.gacc(ai);
                            for (std::size_t o = 0; o < sp.outer; ++o)
                              for (std::size_t l = 0; l < w; ++l)
                                for (std::size_t i = 0; i < sp.inner; ++i)
                                  ga[(o * sp.len + begin + l) * sp.inner + i] +=
                                      g[(o * w + l) * sp.inner + i];
                          });
}

inline Var reshape(const Var& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ConfigError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor out(std::move(shape), a.value().data());
  std::size_t ai = a.id();
  return a.tape()->record("reshape", std::move(out), {a}, [ai](Tape& t, std::span<const double> g) {
    auto ga = t.gacc(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

inline constexpr std::size_t kGatherZero = std::numeric_limits<std::size_t>::max();

// out.flat[i] = a.flat[index[i]], or 0 where index[i] == kGatherZero.
inline Var gather(const Var& a, std::vector<std::size_t> index, Shape shape) {
  if (numel(shape) != index.size())
    throw ConfigError("gather: " + std::to_string(index.size()) + " indices for shape " +
                      shape_str(shape));
  const Tensor& av = a.value();
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] == kGatherZero) continue;
    if (index[i] >= av.size())
      throw ConfigError("gather: index " + std::to_string(index[i]) + " out of range for " +
                        shape_str(av.shape()));
    out[i] = av[index[i]];
  }
  std::size_t ai = a.id();
  return a.tape()->record("gather", std::move(out), {a},
                          [ai, index = std::move(index)](Tape& t, std::span<const double> g) {
                            auto ga = t.gacc(ai);
                            for (std::size_t i = 0; i < index.size(); ++i)
                              if (index[i] != kGatherZero) ga[index[i]] += g[i];
                          });
}

// Rows of a 2-D tensor selected by id.
inline Var gather_rows(const Var& a, std::span<const std::size_t> rows) {
  const Tensor& av = a.value();
  detail::require_rank("gather_rows", av, 2);
  const std::size_t c = av.dim(1);
  std::vector<std::size_t> idx;
  idx.reserve(rows.size() * c);
  for (std::size_t r : rows) {
    if (r >= av.dim(0))
      throw ConfigError("gather_rows: row " + std::to_string(r) + " out of range for " +
                        shape_str(av.shape()));
    for (std::size_t j = 0; j < c; ++j) idx.push_back(r * c + j);
  }
  return gather(a, std::move(idx), Shape{rows.size(), c});
}

namespace detail {
inline std::vector<std::size_t> segment_offsets(const char* op, const Tensor& a,
                                                std::span<const std::size_t> lengths) {
  require_rank(op, a, 2);
  std::vector<std::size_t> off{0};
  for (std::size_t l : lengths) {
    if (l == 0) throw ConfigError(std::string(op) + ": empty segment");
    off.push_back(off.back() + l);
  }
  if (off.back() != a.dim(0))
    throw ConfigError(std::string(op) + ": segment lengths sum to " + std::to_string(off.back()) +
                      " but input has " + std::to_string(a.dim(0)) + " rows");
  return off;
}
}  // namespace detail

// Mean over consecutive row segments of a [T,C] tensor -> [S,C].
inline Var segment_mean(const Var& a, std::span<const std::size_t> lengths) {
  const Tensor& av = a.value();
  auto off = detail::segment_offsets("segment_mean", av, lengths);
  const std::size_t c = av.dim(1), s = lengths.size();
  Tensor out(Shape{s, c});
  for (std::size_t k = 0; k < s; ++k) {
    const double inv = 1.0 / static_cast<double>(off[k + 1] - off[k]);
    for (std::size_t r = off[k]; r < off[k + 1]; ++r)
      for (std::size_t j = 0; j < c; ++j) out[k * c + j] += av[r * c + j];
    for (std::size_t j = 0; j < c; ++j) out[k * c + j] *= inv;
  }
  std::size_t ai = a.id();
  return a.tape()->record("segment_mean", std::move(out), {a},
                          [ai, off = std::move(off), c](Tape& t, std::span<const double> g) {
                            auto ga = t.gacc(ai);
                            for (std::size_t k = 0; k + 1 < off.size(); ++k) {
                              const double inv = 1.0 / static_cast<double>(off[k + 1] - off[k]);
                              for (std::size_t r = off[k]; r < off[k + 1]; ++r)
                                for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += g[k * c + j] * inv;
                            }
                          });
}

// Max over consecutive row segments of a [T,C] tensor -> [S,C].
inline Var segment_max(const Var& a, std::span<const std::size_t> lengths) {
  const Tensor& av = a.value();
  auto off = detail::segment_offsets("segment_max", av, lengths);
  const std::size_t c = av.dim(1), s = lengths.size();
  Tensor out(Shape{s, c});
  std::vector<std::size_t> arg(s * c);
  for (std::size_t k = 0; k < s; ++k)
    for (std::size_t j = 0; j < c; ++j) {
      std::size_t best = off[k] * c + j;
      for (std::size_t r = off[k] + 1; r < off[k + 1]; ++r)
        if (av[r * c + j] > av[best]) best = r * c + j;
      out[k * c + j] = av[best];
      arg[k * c + j] = best;
    }
  std::size_t ai = a.id();
  return a.tape()->record("segment_max", std::move(out), {a},
                          [ai, arg = std::move(arg)](Tape& t, std::span<const double> g) {
                            auto ga = t.gacc(ai);
                            for (std::size_t i = 0; i < arg.size(); ++i) ga[arg[i]] += g[i];
                          });
}

// Bilinear sampling of a [C,H,W] image at pixel coordinates grid[Ho,Wo,2] =
// (x, y). Taps outside the image read as zero. Differentiable in both the
// image and the grid (away from integer coordinates, where it has kinks).
inline Var bilinear_sample(const Var& image, const Var& grid) {
  const Tensor& iv = image.value();
  const Tensor& gv = grid.value();
  detail::require_rank("bilinear_sample", iv, 3);
  detail::require_rank("bilinear_sample", gv, 3);
  if (gv.dim(2) != 2)
    throw ConfigError("bilinear_sample: grid must be [Ho,Wo,2], got " + shape_str(gv.shape()));
  const std::size_t C = iv.dim(0), H = iv.dim(1), W = iv.dim(2);
  const std::size_t Ho = gv.dim(0), Wo = gv.dim(1);
  Tensor out(Shape{C, Ho, Wo});
  auto px = [&](const Tensor& img, std::size_t c, long y, long x) -> double {
    if (y < 0 || x < 0 || y >= static_cast<long>(H) || x >= static_cast<long>(W)) return 0.0;
    return img[(c * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(x)];
  };
  for (std::size_t i = 0; i < Ho; ++i)
    for (std::size_t j = 0; j < Wo; ++j) {
      const double sx = gv[(i * Wo + j) * 2], sy = gv[(i * Wo + j) * 2 + 1];
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
      const double fx = sx - fx0, fy = sy - fy0;
      for (std::size_t c = 0; c < C; ++c) {
        const double v00 = px(iv, c, y0, x0), v01 = px(iv, c, y0, x0 + 1);
        const double v10 = px(iv, c, y0 + 1, x0), v11 = px(iv, c, y0 + 1, x0 + 1);
        out[(c * Ho + i) * Wo + j] = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
      }
    }
  std::size_t ii = image.id(), gi = grid.id();
  return image.tape()->record(
      "bilinear_sample", std::move(out), {image, grid},
      [ii, gi, C, H, W, Ho, Wo](Tape& t, std::span<const double> g) {
        const Tensor& iv = t.value(ii);
        const Tensor& gv = t.value(gi);
        const bool need_img = t.needs_grad(ii), need_grid = t.needs_grad(gi);
        std::span<double> gimg, ggrid;
        if (need_img) gimg = t.gacc(ii);
        if (need_grid) ggrid = t.gacc(gi);
        auto inside = [&](long y, long x) {
          return y >= 0 && x >= 0 && y < static_cast<long>(H) && x < static_cast<long>(W);
        };
        auto at = [&](long y, long x, std::size_t c) {
          return (c * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(x);
        };
        for (std::size_t i = 0; i < Ho; ++i)
          for (std::size_t j = 0; j < Wo; ++j) {
            const double sx = gv[(i * Wo + j) * 2], sy = gv[(i * Wo + j) * 2 + 1];
            const double fx0 = std::floor(sx), fy0 = std::floor(sy);
            const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
            const double fx = sx - fx0, fy = sy - fy0;
            double dsx = 0.0, dsy = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
              const double go = g[(c * Ho + i) * Wo + j];
              if (go == 0.0) continue;
              const long ys[2] = {y0, y0 + 1}, xs[2] = {x0, x0 + 1};
              const double wy[2] = {1 - fy, fy}, wx[2] = {1 - fx, fx};
              double v[2][2];
              for (int a = 0; a < 2; ++a)
                for (int b = 0; b < 2; ++b) {
                  const bool in = inside(ys[a], xs[b]);
                  v[a][b] = in ? iv[at(ys[a], xs[b], c)] : 0.0;
                  if (need_img && in) gimg[at(ys[a], xs[b], c)] += go * wy[a] * wx[b];
                }
              dsx += go * ((1 - fy) * (v[0][1] - v[0][0]) + fy * (v[1][1] - v[1][0]));
              dsy += go * ((1 - fx) * (v[1][0] - v[0][0]) + fx * (v[1][1] - v[0][1]));
            }
            if (need_grid) {
              ggrid[(i * Wo + j) * 2] += dsx;
              ggrid[(i * Wo + j) * 2 + 1] += dsy;
            }
          }
      });
}

// ---------------------------------------------------------------------------
// Tag-based dispatch, used by generic graph builders and tests.
// ---------------------------------------------------------------------------

struct OpArgs {
  double scalar = 1.0;
  double lo = 0.0, hi = 1.0;
  std::size_t axis = 0;
  std::size_t begin = 0, end = 1;
  Shape shape;
};

inline Var forward_op(std::string_view kind, std::span<const Var> in, const OpArgs& args = {}) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n)
      throw ConfigError(std::string(kind) + ": expected " + std::to_string(n) + " inputs, got " +
                        std::to_string(in.size()));
  };
  if (kind == "concat") return concat(in);
  if (kind == "add" || kind == "sub" || kind == "mul" || kind == "matmul" ||
      kind == "cosine_similarity" || kind == "bilinear_sample") {
    arity(2);
    if (kind == "add") return add(in[0], in[1]);
    if (kind == "sub") return sub(in[0], in[1]);
    if (kind == "mul") return mul(in[0], in[1]);
    if (kind == "matmul") return matmul(in[0], in[1]);
    if (kind == "cosine_similarity") return cosine_similarity(in[0], in[1]);
    return bilinear_sample(in[0], in[1]);
  }
  arity(1);
  const Var& a = in[0];
  if (kind == "scale") return scale(a, args.scalar);
  if (kind == "shift") return shift(a, args.scalar);
  if (kind == "exp") return exp(a);
  if (kind == "log") return log(a);
  if (kind == "tanh") return tanh(a);
  if (kind == "relu") return relu(a);
  if (kind == "clamp") return clamp(a, args.lo, args.hi);
  if (kind == "softmax") return softmax(a);
  if (kind == "log_softmax") return log_softmax(a);
  if (kind == "sum") return sum(a);
  if (kind == "mean") return mean(a);
  if (kind == "sum_axis") return sum_axis(a, args.axis);
  if (kind == "mean_axis") return mean_axis(a, args.axis);
  if (kind == "max_axis") return max_axis(a, args.axis);
  if (kind == "l2_normalize") return l2_normalize(a);
  if (kind == "transpose") return transpose(a);
  if (kind == "slice") return slice(a, args.axis, args.begin, args.end);
  if (kind == "reshape") return reshape(a, args.shape);
  throw ConfigError("forward_op: unknown primitive '" + std::string(kind) + "'");
}

inline Var forward_op(std::string_view kind, std::initializer_list<Var> in, const OpArgs& args = {}) {
  return forward_op(kind, std::span<const Var>(in.begin(), in.size()), args);
}

}  // namespace vlpa

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lms/array.hpp"
#include "lms/cg.hpp"
#include "lms/errors.hpp"
#include "lms/linear_operator.hpp"

// Reverse-mode differentiation over array-valued nodes.
//
// Every node holds a flat vector of doubles. Complex nodes store interleaved
// (re, im) pairs; their gradient buffers hold (dL/dRe, dL/dIm) in the same
// layout, which makes the backward rule of a complex-linear map its adjoint and
// the real inner product of two interleaved buffers equal to Re<a, b>.

namespace lms::ad {

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const std::vector<double>& value() const;
  const Shape& shape() const;
  bool is_complex() const;
  /// Value of a single-element node.
  double scalar() const;
  RealArray real_value() const;
  ComplexArray complex_value() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Values = std::vector<double>;
  using Forward = std::function<Values(const Tape&)>;
  using Backward = std::function<void(Tape&, std::span<const double>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(const RealArray& x) { return push_leaf(x.shape(), false, x.vec(), true); }

  Var constant(const RealArray& x) { return push_leaf(x.shape(), false, x.vec(), false); }

  Var constant(const ComplexArray& x) {
    Values v(2 * x.size());
    std::memcpy(v.data(), x.data().data(), v.size() * sizeof(double));
    return push_leaf(x.shape(), true, std::move(v), false);
  }

  Var zeros(const Shape& shape, bool complex) {
    return push_leaf(shape, complex, Values((complex ? 2 : 1) * shape_size(shape), 0.0), false);
  }

  /// Record a primitive. The forward callable computes the node value from the
  /// values of `inputs`; the backward callable receives dL/d(node) and adds the
  /// contributions to its inputs through accumulate().
  Var record(Shape shape, bool complex, std::vector<std::size_t> inputs, Forward forward, Backward backward) {
    bool needs = false;
    for (auto in : inputs) needs = needs || nodes_.at(in).requires_grad;
    Values value = forward(*this);
    const std::size_t expected = (complex ? 2 : 1) * shape_size(shape);
    if (value.size() != expected) {
      throw ShapeError("tape primitive produced " + std::to_string(value.size()) + " values, expected " +
                       std::to_string(expected));
    }
    nodes_.push_back(Node{std::move(shape), complex, std::move(value), std::move(inputs), std::move(forward),
                          std::move(backward), needs, false});
    return Var(this, nodes_.size() - 1);
  }

  const Values& value(std::size_t id) const { return nodes_.at(id).value; }
  const Shape& shape(std::size_t id) const { return nodes_.at(id).shape; }
  bool is_complex(std::size_t id) const { return nodes_.at(id).complex; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  void accumulate(std::size_t id, std::span<const double> g) {
    if (!nodes_[id].requires_grad) return;
    auto& buf = grads_[id];
    if (buf.empty()) buf.assign(nodes_[id].value.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
  }

  /// Scalar convenience for accumulate().
  void accumulate_scalar(std::size_t id, double g) { accumulate(id, std::span<const double>(&g, 1)); }

  /// d(output)/d(wrt) for each requested leaf, by one reverse sweep.
  std::vector<RealArray> gradients(Var output, std::span<const Var> wrt) {
    check_owned(output, "output");
    if (nodes_[output.id()].value.size() != 1) {
      throw ShapeError("gradient requires a scalar objective, got shape " +
                       shape_string(nodes_[output.id()].shape));
    }
    if (!std::isfinite(nodes_[output.id()].value[0])) {
      throw NumericalError("objective value is not finite", output.id());
    }
    for (const auto& w : wrt) {
      check_owned(w, "wrt");
      if (nodes_[w.id()].complex) throw DependencyError("gradient w.r.t. a complex node is not supported");
    }
    grads_.assign(nodes_.size(), {});
    accumulate_scalar(output.id(), 1.0);
    for (std::size_t k = output.id() + 1; k-- > 0;) {
      auto& node = nodes_[k];
      if (grads_[k].empty() || !node.backward) continue;
      const Values g = std::move(grads_[k]);
      node.backward(*this, g);
      grads_[k] = g;
    }
    std::vector<RealArray> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
      const auto& node = nodes_[w.id()];
      Values g = grads_[w.id()];
      if (g.empty()) g.assign(node.value.size(), 0.0);
      out.emplace_back(node.shape, std::move(g));
    }
    grads_.clear();
    return out;
  }

  RealArray gradient(Var output, Var wrt) { return std::move(gradients(output, std::span<const Var>(&wrt, 1)).front()); }

  /// Recompute every recorded node from its inputs and compare with the
  /// stored values bitwise.
  bool replay_matches() const {
    for (const auto& node : nodes_) {
      if (!node.forward) continue;
      if (node.forward(*this) != node.value) return false;
    }
    return true;
  }

 private:
  struct Node {
    Shape shape;
    bool complex;
    Values value;
    std::vector<std::size_t> inputs;
    Forward forward;
    Backward backward;
    bool requires_grad;
    bool leaf_variable;
  };

  Var push_leaf(const Shape& shape, bool complex, Values value, bool is_variable) {
    nodes_.push_back(Node{shape, complex, std::move(value), {}, {}, {}, is_variable, is_variable});
    return Var(this, nodes_.size() - 1);
  }

  void check_owned(const Var& v, const char* what) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
      throw DependencyError(std::string(what) + " variable is not on this tape");
    }
  }

  std::vector<Node> nodes_;
  std::vector<Values> grads_;
};

inline const std::vector<double>& Var::value() const { return tape_->value(id_); }
inline const Shape& Var::shape() const { return tape_->shape(id_); }
inline bool Var::is_complex() const { return tape_->is_complex(id_); }
inline double Var::scalar() const {
  const auto& v = value();
  if (v.size() != 1) throw ShapeError("scalar() on non-scalar node " + shape_string(shape()));
  return v[0];
}
inline RealArray Var::real_value() const {
  if (is_complex()) throw ShapeError("real_value() on complex node");
  return RealArray(shape(), value());
}
inline ComplexArray Var::complex_value() const {
  if (!is_complex()) throw ShapeError("complex_value() on real node");
  ComplexArray out(shape());
  std::memcpy(static_cast<void*>(out.data().data()), value().data(), value().size() * sizeof(double));
  return out;
}

/// d(objective)/d(wrt) where wrt is a variable leaf on the same tape.
inline RealArray grad(Var objective, Var wrt) {
  if (!objective.valid()) throw DependencyError("objective is not on a tape");
  if (wrt.tape() != objective.tape()) throw DependencyError("wrt variable belongs to a different tape");
  return objective.tape()->gradient(objective, wrt);
}

// ---- primitives -----------------------------------------------------------

namespace detail {

inline void same_layout(const Var& a, const Var& b, const char* op) {
  if (a.tape() != b.tape()) throw DependencyError(std::string(op) + ": operands on different tapes");
  if (a.shape() != b.shape() || a.is_complex() != b.is_complex()) {
    throw ShapeError(std::string(op) + ": operand layouts differ (" + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()) + ")");
  }
}

inline void require_scalar(const Var& s, const char* op) {
  if (s.value().size() != 1) throw ShapeError(std::string(op) + ": expected a scalar node");
}

inline ComplexArray as_complex(const std::vector<double>& v, const Shape& shape) {
  ComplexArray out(shape);
  std::memcpy(static_cast<void*>(out.data().data()), v.data(), v.size() * sizeof(double));
  return out;
}

inline std::vector<double> as_values(const ComplexArray& c) {
  std::vector<double> v(2 * c.size());
  std::memcpy(v.data(), c.data().data(), v.size() * sizeof(double));
  return v;
}

}  // namespace detail

inline Var add(Var a, Var b) {
  detail::same_layout(a, b, "add");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(
      a.shape(), a.is_complex(), {ia, ib},
      [ia, ib](const Tape& t) {
        auto out = t.value(ia);
        const auto& vb = t.value(ib);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
        return out;
      },
      [ia, ib](Tape& t, std::span<const double> g) {
        t.accumulate(ia, g);
        t.accumulate(ib, g);
      });
}

inline Var sub(Var a, Var b) {
  detail::same_layout(a, b, "sub");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(
      a.shape(), a.is_complex(), {ia, ib},
      [ia, ib](const Tape& t) {
        auto out = t.value(ia);
        const auto& vb = t.value(ib);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
        return out;
      },
      [ia, ib](Tape& t, std::span<const double> g) {
        t.accumulate(ia, g);
        std::vector<double> neg(g.begin(), g.end());
        for (auto& v : neg) v = -v;
        t.accumulate(ib, neg);
      });
}

/// Elementwise product of two real nodes.
inline Var mul(Var a, Var b) {
  detail::same_layout(a, b, "mul");
  if (a.is_complex()) throw ShapeError("mul: complex operands are not supported");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(
      a.shape(), false, {ia, ib},
      [ia, ib](const Tape& t) {
        auto out = t.value(ia);
        const auto& vb = t.value(ib);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
        return out;
      },
      [ia, ib](Tape& t, std::span<const double> g) {
        const auto& va = t.value(ia);
        const auto& vb = t.value(ib);
        std::vector<double> ga(g.size()), gb(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] = g[i] * vb[i];
          gb[i] = g[i] * va[i];
        }
        t.accumulate(ia, ga);
        t.accumulate(ib, gb);
      });
}

/// Multiply by a fixed real constant.
inline Var scale(Var a, double s) {
  const auto ia = a.id();
  return a.tape()->record(
      a.shape(), a.is_complex(), {ia},
      [ia, s](const Tape& t) {
        auto out = t.value(ia);
        for (auto& v : out) v *= s;
        return out;
      },
      [ia, s](Tape& t, std::span<const double> g) {
        std::vector<double> ga(g.begin(), g.end());
        for (auto& v : ga) v *= s;
        t.accumulate(ia, ga);
      });
}

/// Multiply an array by a real scalar node.
inline Var scale(Var a, Var s) {
  detail::require_scalar(s, "scale");
  const auto ia = a.id(), is = s.id();
  return a.tape()->record(
      a.shape(), a.is_complex(), {ia, is},
      [ia, is](const Tape& t) {
        auto out = t.value(ia);
        const double sv = t.value(is)[0];
        for (auto& v : out) v *= sv;
        return out;
      },
      [ia, is](Tape& t, std::span<const double> g) {
        const auto& va = t.value(ia);
        const double sv = t.value(is)[0];
        std::vector<double> ga(g.size());
        double gs = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] = g[i] * sv;
          gs += g[i] * va[i];
        }
        t.accumulate(ia, ga);
        t.accumulate_scalar(is, gs);
      });
}

/// x + alpha * p with a scalar node alpha.
inline Var axpy(Var x, Var alpha, Var p) {
  detail::same_layout(x, p, "axpy");
  detail::require_scalar(alpha, "axpy");
  const auto ix = x.id(), ia = alpha.id(), ip = p.id();
  return x.tape()->record(
      x.shape(), x.is_complex(), {ix, ia, ip},
      [ix, ia, ip](const Tape& t) {
        auto out = t.value(ix);
        const double av = t.value(ia)[0];
        const auto& vp = t.value(ip);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += av * vp[i];
        return out;
      },
      [ix, ia, ip](Tape& t, std::span<const double> g) {
        const double av = t.value(ia)[0];
        const auto& vp = t.value(ip);
        std::vector<double> gp(g.size());
        double ga = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
          gp[i] = av * g[i];
          ga += g[i] * vp[i];
        }
        t.accumulate(ix, g);
        t.accumulate_scalar(ia, ga);
        t.accumulate(ip, gp);
      });
}

/// Real inner product of the raw buffers; for complex nodes this is Re<a, b>.
inline Var dot(Var a, Var b) {
  detail::same_layout(a, b, "dot");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(
      Shape{}, false, {ia, ib},
      [ia, ib](const Tape& t) {
        const auto& va = t.value(ia);
        const auto& vb = t.value(ib);
        double acc = 0.0;
        for (std::size_t i = 0; i < va.size(); ++i) acc += va[i] * vb[i];
        return std::vector<double>{acc};
      },
      [ia, ib](Tape& t, std::span<const double> g) {
        const auto& va = t.value(ia);
        const auto& vb = t.value(ib);
        std::vector<double> ga(va.size()), gb(va.size());
        for (std::size_t i = 0; i < va.size(); ++i) {
          ga[i] = g[0] * vb[i];
          gb[i] = g[0] * va[i];
        }
        t.accumulate(ia, ga);
        t.accumulate(ib, gb);
      });
}

inline Var sum(Var a) {
  if (a.is_complex()) throw ShapeError("sum: complex operand");
  const auto ia = a.id();
  return a.tape()->record(
      Shape{}, false, {ia},
      [ia](const Tape& t) {
        double acc = 0.0;
        for (double v : t.value(ia)) acc += v;
        return std::vector<double>{acc};
      },
      [ia](Tape& t, std::span<const double> g) {
        t.accumulate(ia, std::vector<double>(t.value(ia).size(), g[0]));
      });
}

/// a / b for scalar nodes.
inline Var div(Var a, Var b) {
  detail::require_scalar(a, "div");
  detail::require_scalar(b, "div");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(
      Shape{}, false, {ia, ib}, [ia, ib](const Tape& t) { return std::vector<double>{t.value(ia)[0] / t.value(ib)[0]}; },
      [ia, ib](Tape& t, std::span<const double> g) {
        const double va = t.value(ia)[0], vb = t.value(ib)[0];
        t.accumulate_scalar(ia, g[0] / vb);
        t.accumulate_scalar(ib, -g[0] * va / (vb * vb));
      });
}

/// a / b for scalar nodes, defined as 0 (with zero derivative) when b == 0.
inline Var safe_div(Var a, Var b) {
  detail::require_scalar(a, "safe_div");
  detail::require_scalar(b, "safe_div");
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(
      Shape{}, false, {ia, ib},
      [ia, ib](const Tape& t) {
        const double vb = t.value(ib)[0];
        return std::vector<double>{vb == 0.0 ? 0.0 : t.value(ia)[0] / vb};
      },
      [ia, ib](Tape& t, std::span<const double> g) {
        const double va = t.value(ia)[0], vb = t.value(ib)[0];
        if (vb == 0.0) return;
        t.accumulate_scalar(ia, g[0] / vb);
        t.accumulate_scalar(ib, -g[0] * va / (vb * vb));
      });
}

namespace detail {

template <typename F, typename D>
Var unary(Var a, const char* name, F f, D df) {
  if (a.is_complex()) throw ShapeError(std::string(name) + ": complex operand");
  const auto ia = a.id();
  return a.tape()->record(
      a.shape(), false, {ia},
      [ia, f](const Tape& t) {
        auto out = t.value(ia);
        for (auto& v : out) v = f(v);
        return out;
      },
      [ia, df](Tape& t, std::span<const double> g) {
        const auto& va = t.value(ia);
        std::vector<double> ga(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * df(va[i]);
        t.accumulate(ia, ga);
      });
}

}  // namespace detail

inline Var log(Var a) {
  return detail::unary(a, "log", [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

inline Var exp(Var a) {
  return detail::unary(a, "exp", [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

inline Var relu(Var a) {
  return detail::unary(
      a, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var reshape(Var a, Shape shape) {
  if (shape_size(shape) != shape_size(a.shape())) {
    throw ShapeError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  const auto ia = a.id();
  return a.tape()->record(
      std::move(shape), a.is_complex(), {ia}, [ia](const Tape& t) { return t.value(ia); },
      [ia](Tape& t, std::span<const double> g) { t.accumulate(ia, g); });
}

/// Embed a real node as complex with zero imaginary part.
inline Var to_complex(Var a) {
  if (a.is_complex()) throw ShapeError("to_complex: operand already complex");
  const auto ia = a.id();
  return a.tape()->record(
      a.shape(), true, {ia},
      [ia](const Tape& t) {
        const auto& va = t.value(ia);
        std::vector<double> out(2 * va.size(), 0.0);
        for (std::size_t i = 0; i < va.size(); ++i) out[2 * i] = va[i];
        return out;
      },
      [ia](Tape& t, std::span<const double> g) {
        std::vector<double> ga(g.size() / 2);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[2 * i];
        t.accumulate(ia, ga);
      });
}

/// Real part of a complex node.
inline Var real_part(Var a) {
  if (!a.is_complex()) throw ShapeError("real_part: operand is real");
  const auto ia = a.id();
  return a.tape()->record(
      a.shape(), false, {ia},
      [ia](const Tape& t) {
        const auto& va = t.value(ia);
        std::vector<double> out(va.size() / 2);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[2 * i];
        return out;
      },
      [ia](Tape& t, std::span<const double> g) {
        std::vector<double> ga(2 * g.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[2 * i] = g[i];
        t.accumulate(ia, ga);
      });
}

/// Apply a complex-linear operator; the backward rule is the adjoint.
inline Var apply(const LinearOperator& op, Var x) {
  if (!x.is_complex()) throw ShapeError("apply: operator input must be complex");
  require_shape(x.shape(), op.domain_shape(), "apply");
  const auto ix = x.id();
  return x.tape()->record(
      op.codomain_shape(), true, {ix},
      [ix, op](const Tape& t) { return detail::as_values(op.apply(detail::as_complex(t.value(ix), t.shape(ix)))); },
      [ix, op](Tape& t, std::span<const double> g) {
        ComplexArray gy(op.codomain_shape());
        std::memcpy(static_cast<void*>(gy.data().data()), g.data(), g.size() * sizeof(double));
        t.accumulate(ix, detail::as_values(op.adjoint(gy)));
      });
}

/// Fixed real matrix times a real node (flattened), reshaped to out_shape.
inline Var matvec(std::shared_ptr<const Eigen::MatrixXd> m, Var x, Shape out_shape) {
  if (x.is_complex()) throw ShapeError("matvec: complex operand");
  if (static_cast<std::size_t>(m->cols()) != x.value().size() ||
      static_cast<std::size_t>(m->rows()) != shape_size(out_shape)) {
    throw ShapeError("matvec: matrix does not match operand shapes");
  }
  const auto ix = x.id();
  return x.tape()->record(
      std::move(out_shape), false, {ix},
      [ix, m](const Tape& t) {
        const auto& vx = t.value(ix);
        std::vector<double> out(static_cast<std::size_t>(m->rows()));
        Eigen::Map<Eigen::VectorXd>(out.data(), m->rows()) =
            (*m) * Eigen::Map<const Eigen::VectorXd>(vx.data(), m->cols());
        return out;
      },
      [ix, m](Tape& t, std::span<const double> g) {
        std::vector<double> gx(static_cast<std::size_t>(m->cols()));
        Eigen::Map<Eigen::VectorXd>(gx.data(), m->cols()) =
            m->transpose() * Eigen::Map<const Eigen::VectorXd>(g.data(), m->rows());
        t.accumulate(ix, gx);
      });
}

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// 2D convolution: x [Cin,H,W], w [Cout,Cin,k,k], b [Cout] -> [Cout,Ho,Wo].
inline Var conv2d(Var x, Var w, Var b, ConvGeometry geo) {
  const Shape xs = x.shape(), ws = w.shape();
  if (xs.size() != 3 || ws.size() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || b.shape() != Shape{ws[0]}) {
    throw ShapeError("conv2d: incompatible shapes x" + shape_string(xs) + " w" + shape_string(ws));
  }
  const std::size_t cin = xs[0], h = xs[1], wd = xs[2], cout = ws[0], k = ws[2];
  const std::size_t s = geo.stride, p = geo.pad;
  if (h + 2 * p < k || wd + 2 * p < k) throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t ho = (h + 2 * p - k) / s + 1, wo = (wd + 2 * p - k) / s + 1;
  const auto ix = x.id(), iw = w.id(), ib = b.id();

  // Visits every (out index, in index, weight index) triple with in-bounds input.
  auto for_each_tap = [=](auto&& body) {
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t u = 0; u < k; ++u)
          for (std::size_t v = 0; v < k; ++v) {
            const std::size_t widx = ((o * cin + c) * k + u) * k + v;
            for (std::size_t i = 0; i < ho; ++i) {
              const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i * s + u) - static_cast<std::ptrdiff_t>(p);
              if (r < 0 || r >= static_cast<std::ptrdiff_t>(h)) continue;
              const std::size_t out_row = (o * ho + i) * wo;
              const std::size_t in_row = (c * h + static_cast<std::size_t>(r)) * wd;
              for (std::size_t j = 0; j < wo; ++j) {
                const std::ptrdiff_t q = static_cast<std::ptrdiff_t>(j * s + v) - static_cast<std::ptrdiff_t>(p);
                if (q < 0 || q >= static_cast<std::ptrdiff_t>(wd)) continue;
                body(out_row + j, in_row + static_cast<std::size_t>(q), widx);
              }
            }
          }
  };

  return x.tape()->record(
      Shape{cout, ho, wo}, false, {ix, iw, ib},
      [=](const Tape& t) {
        const auto& vx = t.value(ix);
        const auto& vw = t.value(iw);
        const auto& vb = t.value(ib);
        std::vector<double> out(cout * ho * wo);
        for (std::size_t o = 0; o < cout; ++o)
          std::fill(out.begin() + static_cast<std::ptrdiff_t>(o * ho * wo),
                    out.begin() + static_cast<std::ptrdiff_t>((o + 1) * ho * wo), vb[o]);
        for_each_tap([&](std::size_t oi, std::size_t xi, std::size_t wi) { out[oi] += vw[wi] * vx[xi]; });
        return out;
      },
      [=](Tape& t, std::span<const double> g) {
        const auto& vx = t.value(ix);
        const auto& vw = t.value(iw);
        std::vector<double> gx(vx.size(), 0.0), gw(vw.size(), 0.0), gb(cout, 0.0);
        const bool need_x = t.requires_grad(ix), need_w = t.requires_grad(iw);
        for_each_tap([&](std::size_t oi, std::size_t xi, std::size_t wi) {
          if (need_x) gx[xi] += vw[wi] * g[oi];
          if (need_w) gw[wi] += vx[xi] * g[oi];
        });
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t i = 0; i < ho * wo; ++i) gb[o] += g[o * ho * wo + i];
        t.accumulate(ix, gx);
        t.accumulate(iw, gw);
        t.accumulate(ib, gb);
      });
}

/// Transposed 2D convolution: x [Cin,H,W], w [Cin,Cout,k,k], b [Cout] ->
/// [Cout, (H-1)s - 2p + k, (W-1)s - 2p + k].
inline Var conv_transpose2d(Var x, Var w, Var b, ConvGeometry geo) {
  const Shape xs = x.shape(), ws = w.shape();
  if (xs.size() != 3 || ws.size() != 4 || ws[0] != xs[0] || ws[2] != ws[3] || b.shape() != Shape{ws[1]}) {
    throw ShapeError("conv_transpose2d: incompatible shapes x" + shape_string(xs) + " w" + shape_string(ws));
  }
  const std::size_t cin = xs[0], h = xs[1], wd = xs[2], cout = ws[1], k = ws[2];
  const std::size_t s = geo.stride, p = geo.pad;
  if ((h - 1) * s + k < 2 * p + 1 || (wd - 1) * s + k < 2 * p + 1) {
    throw ShapeError("conv_transpose2d: padding too large");
  }
  const std::size_t ho = (h - 1) * s + k - 2 * p, wo = (wd - 1) * s + k - 2 * p;
  const auto ix = x.id(), iw = w.id(), ib = b.id();

  auto for_each_tap = [=](auto&& body) {
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t u = 0; u < k; ++u)
          for (std::size_t v = 0; v < k; ++v) {
            const std::size_t widx = ((c * cout + o) * k + u) * k + v;
            for (std::size_t i = 0; i < h; ++i) {
              const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(i * s + u) - static_cast<std::ptrdiff_t>(p);
              if (r < 0 || r >= static_cast<std::ptrdiff_t>(ho)) continue;
              const std::size_t out_row = (o * ho + static_cast<std::size_t>(r)) * wo;
              const std::size_t in_row = (c * h + i) * wd;
              for (std::size_t j = 0; j < wd; ++j) {
                const std::ptrdiff_t q = static_cast<std::ptrdiff_t>(j * s + v) - static_cast<std::ptrdiff_t>(p);
                if (q < 0 || q >= static_cast<std::ptrdiff_t>(wo)) continue;
                body(out_row + static_cast<std::size_t>(q), in_row + j, widx);
              }
            }
          }
  };

  return x.tape()->record(
      Shape{cout, ho, wo}, false, {ix, iw, ib},
      [=](const Tape& t) {
        const auto& vx = t.value(ix);
        const auto& vw = t.value(iw);
        const auto& vb = t.value(ib);
        std::vector<double> out(cout * ho * wo);
        for (std::size_t o = 0; o < cout; ++o)
          std::fill(out.begin() + static_cast<std::ptrdiff_t>(o * ho * wo),
                    out.begin() + static_cast<std::ptrdiff_t>((o + 1) * ho * wo), vb[o]);
        for_each_tap([&](std::size_t oi, std::size_t xi, std::size_t wi) { out[oi] += vw[wi] * vx[xi]; });
        return out;
      },
      [=](Tape& t, std::span<const double> g) {
        const auto& vx = t.value(ix);
        const auto& vw = t.value(iw);
        std::vector<double> gx(vx.size(), 0.0), gw(vw.size(), 0.0), gb(cout, 0.0);
        const bool need_x = t.requires_grad(ix), need_w = t.requires_grad(iw);
        for_each_tap([&](std::size_t oi, std::size_t xi, std::size_t wi) {
          if (need_x) gx[xi] += vw[wi] * g[oi];
          if (need_w) gw[wi] += vx[xi] * g[oi];
        });
        for (std::size_t o = 0; o < cout; ++o)
          for (std::size_t i = 0; i < ho * wo; ++i) gb[o] += g[o * ho * wo + i];
        t.accumulate(ix, gx);
        t.accumulate(iw, gw);
        t.accumulate(ib, gb);
      });
}

// ---- unrolled conjugate gradients ----------------------------------------

struct CgNodes {
  Var solution;
  double relative_residual = 0.0;
};

/// Exactly cfg.iterations CG steps from zero, recorded on the tape so the
/// gradient is that of the truncated solve.
inline CgNodes cg_solve(const LinearOperator& a, Var b, const CgConfig& cfg) {
  if (cfg.iterations < 1) throw ConfigError("cg_solve: iterations must be >= 1");
  if (!b.is_complex()) throw ShapeError("cg_solve: right-hand side must be complex");
  require_shape(b.shape(), a.domain_shape(), "cg_solve rhs");
  Tape& tape = *b.tape();
  Var x = tape.zeros(b.shape(), true);
  Var r = b;
  Var p = b;
  Var rs = dot(r, r);
  const double b_norm = std::sqrt(rs.scalar());
  for (int it = 0; it < cfg.iterations; ++it) {
    Var ap = apply(a, p);
    Var alpha = safe_div(rs, dot(p, ap));
    x = axpy(x, alpha, p);
    r = axpy(r, scale(alpha, -1.0), ap);
    Var rs_new = dot(r, r);
    if (!std::isfinite(rs_new.scalar())) {
      throw NumericalError("unrolled cg: non-finite residual", static_cast<std::size_t>(it));
    }
    if (std::sqrt(rs_new.scalar()) <= cfg.stop_below * b_norm) {
      rs = rs_new;
      break;
    }
    Var beta = safe_div(rs_new, rs);
    p = axpy(r, beta, p);
    rs = rs_new;
  }
  return {x, b_norm > 0.0 ? std::sqrt(rs.scalar()) / b_norm : 0.0};
}

// ---- gradient checking ----------------------------------------------------

using Objective = std::function<Var(Tape&, Var)>;

struct GradientCheck {
  double max_relative_error = 0.0;
  RealArray analytic;
  RealArray numeric;
};

/// Compare the taped gradient of objective at point with central differences.
/// The error is max |fd - analytic| / |analytic| over components with
/// |analytic| > 1e-8.
inline GradientCheck check_gradient(const Objective& objective, const RealArray& point, double step) {
  if (!(step > 0.0)) throw ConfigError("finite difference step must be positive");
  GradientCheck out;
  {
    Tape tape;
    Var z = tape.variable(point);
    out.analytic = tape.gradient(objective(tape, z), z);
  }
  auto eval = [&](const RealArray& p) {
    Tape tape;
    return objective(tape, tape.variable(p)).scalar();
  };
  out.numeric = RealArray(point.shape());
  RealArray probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + step;
    const double fp = eval(probe);
    probe[i] = point[i] - step;
    const double fm = eval(probe);
    probe[i] = point[i];
    out.numeric[i] = (fp - fm) / (2.0 * step);
    const double a = out.analytic[i];
    if (!std::isfinite(a) || !std::isfinite(out.numeric[i])) {
      out.max_relative_error = std::numeric_limits<double>::infinity();
    } else if (std::abs(a) > 1e-8) {
      out.max_relative_error = std::max(out.max_relative_error, std::abs(out.numeric[i] - a) / std::abs(a));
    }
  }
  return out;
}

inline double finite_difference_check(const Objective& objective, const RealArray& point, double step) {
  return check_gradient(objective, point, step).max_relative_error;
}

}  // namespace lms::ad

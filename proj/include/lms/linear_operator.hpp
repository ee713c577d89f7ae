#pragma once

#include <Eigen/Dense>

#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>

#include "lms/array.hpp"
#include "lms/fft.hpp"
#include "lms/random.hpp"

namespace lms {

/// A complex-linear map between array shapes together with its adjoint.
///
/// Operators are immutable values; the callables should capture their state
/// through shared pointers so that copies stay cheap.
class LinearOperator {
 public:
  using Fn = std::function<ComplexArray(const ComplexArray&)>;

  LinearOperator() = default;
  LinearOperator(Shape domain, Shape codomain, Fn apply, Fn adjoint, std::string name = "operator")
      : domain_(std::move(domain)),
        codomain_(std::move(codomain)),
        apply_(std::move(apply)),
        adjoint_(std::move(adjoint)),
        name_(std::move(name)) {}

  const Shape& domain_shape() const noexcept { return domain_; }
  const Shape& codomain_shape() const noexcept { return codomain_; }
  const std::string& name() const noexcept { return name_; }

  ComplexArray apply(const ComplexArray& x) const {
    require_shape(x.shape(), domain_, (name_ + " apply").c_str());
    return apply_(x);
  }

  ComplexArray adjoint(const ComplexArray& y) const {
    require_shape(y.shape(), codomain_, (name_ + " adjoint").c_str());
    return adjoint_(y);
  }

  ComplexArray operator()(const ComplexArray& x) const { return apply(x); }

  LinearOperator adjoint_operator() const {
    return LinearOperator(codomain_, domain_, adjoint_, apply_, name_ + "^H");
  }

 private:
  Shape domain_;
  Shape codomain_;
  Fn apply_;
  Fn adjoint_;
  std::string name_;
};

inline LinearOperator identity_operator(const Shape& shape) {
  auto id = [](const ComplexArray& x) { return x; };
  return LinearOperator(shape, shape, id, id, "identity");
}

/// (a ∘ b)(x) = a(b(x))
inline LinearOperator compose(const LinearOperator& a, const LinearOperator& b) {
  require_shape(a.domain_shape(), b.codomain_shape(), "compose");
  return LinearOperator(
      b.domain_shape(), a.codomain_shape(), [a, b](const ComplexArray& x) { return a.apply(b.apply(x)); },
      [a, b](const ComplexArray& y) { return b.adjoint(a.adjoint(y)); }, a.name() + "*" + b.name());
}

/// alpha * a + beta * b with real weights.
inline LinearOperator linear_combination(double alpha, const LinearOperator& a, double beta,
                                         const LinearOperator& b) {
  require_shape(b.domain_shape(), a.domain_shape(), "linear_combination domain");
  require_shape(b.codomain_shape(), a.codomain_shape(), "linear_combination codomain");
  return LinearOperator(
      a.domain_shape(), a.codomain_shape(),
      [=](const ComplexArray& x) {
        ComplexArray out = alpha * a.apply(x);
        axpy(beta, b.apply(x), out);
        return out;
      },
      [=](const ComplexArray& y) {
        ComplexArray out = alpha * a.adjoint(y);
        axpy(beta, b.adjoint(y), out);
        return out;
      },
      "(" + a.name() + "+" + b.name() + ")");
}

inline LinearOperator scaled(double s, const LinearOperator& a) {
  return LinearOperator(
      a.domain_shape(), a.codomain_shape(), [=](const ComplexArray& x) { return s * a.apply(x); },
      [=](const ComplexArray& y) { return s * a.adjoint(y); }, std::to_string(s) + "*" + a.name());
}

/// Elementwise multiplication by a fixed complex array.
inline LinearOperator diagonal_operator(ComplexArray diag, std::string name = "diag") {
  auto d = std::make_shared<const ComplexArray>(std::move(diag));
  return LinearOperator(
      d->shape(), d->shape(),
      [d](const ComplexArray& x) {
        ComplexArray out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = (*d)[i] * x[i];
        return out;
      },
      [d](const ComplexArray& y) {
        ComplexArray out(y.shape());
        for (std::size_t i = 0; i < y.size(); ++i) out[i] = std::conj((*d)[i]) * y[i];
        return out;
      },
      std::move(name));
}

inline LinearOperator fft_operator(const Shape& shape) {
  return LinearOperator(
      shape, shape, [](const ComplexArray& x) { return fft2_centered(x); },
      [](const ComplexArray& y) { return ifft2_centered(y); }, "F");
}

/// Dense matrix acting on the flattened domain.
inline LinearOperator dense_operator(Eigen::MatrixXcd matrix, Shape domain, Shape codomain) {
  if (static_cast<std::size_t>(matrix.cols()) != shape_size(domain) ||
      static_cast<std::size_t>(matrix.rows()) != shape_size(codomain)) {
    throw ShapeError("dense operator matrix does not match domain/codomain shapes");
  }
  auto m = std::make_shared<const Eigen::MatrixXcd>(std::move(matrix));
  return LinearOperator(
      domain, codomain,
      [m, codomain](const ComplexArray& x) {
        ComplexArray out(codomain);
        Eigen::Map<Eigen::VectorXcd>(out.data().data(), static_cast<Eigen::Index>(out.size())) =
            (*m) * Eigen::Map<const Eigen::VectorXcd>(x.data().data(), static_cast<Eigen::Index>(x.size()));
        return out;
      },
      [m, domain](const ComplexArray& y) {
        ComplexArray out(domain);
        Eigen::Map<Eigen::VectorXcd>(out.data().data(), static_cast<Eigen::Index>(out.size())) =
            m->adjoint() * Eigen::Map<const Eigen::VectorXcd>(y.data().data(), static_cast<Eigen::Index>(y.size()));
        return out;
      },
      "dense");
}

/// Materialize an operator as a dense matrix by applying it to unit vectors.
inline Eigen::MatrixXcd to_dense(const LinearOperator& op) {
  const std::size_t n = shape_size(op.domain_shape());
  const std::size_t m = shape_size(op.codomain_shape());
  Eigen::MatrixXcd out(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  ComplexArray e(op.domain_shape());
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 1.0;
    const ComplexArray col = op.apply(e);
    for (std::size_t i = 0; i < m; ++i) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = col[i];
    e[j] = 0.0;
  }
  return out;
}

/// Max over trials of |<Av, w> - <v, A^H w>| / (|Av| |w|) on seeded random probes.
inline double adjoint_dot_test(const LinearOperator& op, int trials, std::uint64_t seed) {
  Philox rng(seed, 0xad7u);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const ComplexArray v = rng.complex_normal_array(op.domain_shape());
    const ComplexArray w = rng.complex_normal_array(op.codomain_shape());
    const ComplexArray av = op.apply(v);
    const ComplexArray ahw = op.adjoint(w);
    const double num = std::abs(inner(av, w) - inner(v, ahw));
    const double den = norm(av) * norm(w);
    if (num == 0.0) continue;
    worst = std::max(worst, den > 0.0 ? num / den : std::numeric_limits<double>::infinity());
  }
  return worst;
}

}  // namespace lms

#pragma once

#include <cmath>

#include "lms/array.hpp"
#include "lms/errors.hpp"
#include "lms/linear_operator.hpp"

namespace lms {

struct CgConfig {
  int iterations = 25;
  /// Stop once |r| / |b| falls below this. Past roundoff level further steps
  /// only divide noise by noise, which overflows the unrolled derivatives.
  double stop_below = 1e-14;
};

struct CgResult {
  ComplexArray solution;
  /// |b - A x| / |b| from the CG residual recurrence.
  double relative_residual = 0.0;
  int iterations_run = 0;
};

/// Conjugate gradients from the zero vector for Hermitian positive definite A.
///
/// Runs cfg.iterations steps unless the relative residual drops below cfg.stop_below.
inline CgResult cg_solve(const LinearOperator& a, const ComplexArray& b, const CgConfig& cfg) {
  if (cfg.iterations < 1) throw ConfigError("cg_solve: iterations must be >= 1");
  require_shape(b.shape(), a.domain_shape(), "cg_solve rhs");
  const double b_norm = norm(b);
  CgResult result{ComplexArray(b.shape()), 0.0, 0};
  if (b_norm == 0.0) return result;

  ComplexArray& x = result.solution;
  ComplexArray r = b;
  ComplexArray p = b;
  double rs = inner(r, r).real();
  for (int it = 0; it < cfg.iterations; ++it) {
    const ComplexArray ap = a.apply(p);
    const double pap = inner(p, ap).real();
    const double alpha = rs / pap;
    if (!std::isfinite(alpha)) throw NumericalError("cg_solve: non-finite step length", it);
    axpy(alpha, p, x);
    axpy(-alpha, ap, r);
    const double rs_new = inner(r, r).real();
    result.iterations_run = it + 1;
    if (!std::isfinite(rs_new)) throw NumericalError("cg_solve: non-finite residual", it);
    if (std::sqrt(rs_new) <= cfg.stop_below * b_norm) {
      rs = rs_new;
      break;
    }
    const double beta = rs_new / rs;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = r[i] + beta * p[i];
    rs = rs_new;
  }
  result.relative_residual = std::sqrt(rs) / b_norm;
  return result;
}

}  // namespace lms

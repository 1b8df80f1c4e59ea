#pragma once

#include <Eigen/Dense>

#include <functional>
#include <stdexcept>
#include <string>

namespace grace {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

/// Throws std::invalid_argument if the matrix contains NaN or Inf.
void require_finite(const Matrix& m, const std::string& what);

/// Numerically stable log(sum(exp(x))) over all coefficients.
template <typename Derived>
double logsumexp(const Eigen::MatrixBase<Derived>& x) {
  const double m = x.maxCoeff();
  if (!std::isfinite(m)) return m;  // all -inf stays -inf
  return m + std::log((x.array() - m).exp().sum());
}

/// log softmax of a row of logits at the given temperature.
/// exp(result) sums to one; shift-invariant in the logits.
RowVector log_softmax(const RowVector& logits, double temperature = 1.0);

/// softmax convenience wrapper around log_softmax.
RowVector softmax(const RowVector& logits, double temperature = 1.0);

/// Central-difference gradient of a scalar function at `point`.
Vector central_differences(const std::function<double(const Vector&)>& f,
                           const Vector& point, double h = 1e-5);

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// The function must be smooth near `point`; callers checking quantized paths
/// must keep the point away from rounding boundaries.
double finite_diff_check(const std::function<double(const Vector&)>& f,
                         const Vector& point, const Vector& analytic,
                         double h = 1e-5);

}  // namespace grace

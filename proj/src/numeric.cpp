#include "grace/numeric.hpp"

#include <cmath>

namespace grace {

void require_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) {
    throw std::invalid_argument(what + ": non-finite entries");
  }
}

RowVector log_softmax(const RowVector& logits, double temperature) {
  if (logits.size() == 0) {
    throw std::invalid_argument("log_softmax: empty input");
  }
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("log_softmax: temperature must be positive");
  }
  RowVector scaled = logits / temperature;
  return scaled.array() - logsumexp(scaled);
}

RowVector softmax(const RowVector& logits, double temperature) {
  return log_softmax(logits, temperature).array().exp();
}

Vector central_differences(const std::function<double(const Vector&)>& f,
                           const Vector& point, double h) {
  Vector g(point.size());
  Vector x = point;
  for (Index i = 0; i < point.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + h;
    const double fp = f(x);
    x[i] = xi - h;
    const double fm = f(x);
    x[i] = xi;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

double finite_diff_check(const std::function<double(const Vector&)>& f,
                         const Vector& point, const Vector& analytic,
                         double h) {
  if (analytic.size() != point.size()) {
    throw std::invalid_argument("finite_diff_check: gradient/point size mismatch");
  }
  const Vector numeric = central_differences(f, point, h);
  double worst = 0.0;
  for (Index i = 0; i < point.size(); ++i) {
    const double denom = std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace grace

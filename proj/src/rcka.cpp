#include "grace/rcka.hpp"

#include <cmath>

namespace grace {

namespace {

void check_square(const Matrix& k, const char* op) {
  if (k.rows() != k.cols()) {
    throw std::invalid_argument(std::string(op) + ": kernel must be square");
  }
}

}  // namespace

Matrix gram(const Matrix& features) {
  if (features.rows() < 2) {
    throw std::domain_error("gram: need at least two tokens");
  }
  Matrix normalized(features.rows(), features.cols());
  for (Index i = 0; i < features.rows(); ++i) {
    const double n = features.row(i).norm();
    if (n <= 0.0) {
      throw std::domain_error("gram: zero-norm row " + std::to_string(i));
    }
    normalized.row(i) = features.row(i) / n;
  }
  return normalized * normalized.transpose();
}

Matrix center(const Matrix& k) {
  check_square(k, "center");
  const Vector rm = k.rowwise().mean();
  const RowVector cm = k.colwise().mean();
  const double gm = k.mean();
  return ((k.colwise() - rm).rowwise() - cm).array() + gm;
}

double hsic(const Matrix& ka, const Matrix& kb, bool centered) {
  check_square(ka, "hsic");
  check_square(kb, "hsic");
  if (ka.rows() != kb.rows()) {
    throw std::invalid_argument("hsic: kernel sizes differ");
  }
  const Index n = ka.rows();
  if (n < 2) throw std::domain_error("hsic: need at least two tokens");
  const Matrix ca = centered ? ka : center(ka);
  const Matrix cb = centered ? kb : center(kb);
  const double denom = static_cast<double>(n - 1) * static_cast<double>(n - 1);
  return ca.cwiseProduct(cb.transpose()).sum() / denom;
}

double cka(const Matrix& k_teacher, const Matrix& k_student, bool centered) {
  const double self_t = hsic(k_teacher, k_teacher, centered);
  const double self_s = hsic(k_student, k_student, centered);
  if (self_t <= 0.0 || self_s <= 0.0) {
    throw std::domain_error("cka: degenerate representation with zero self-HSIC");
  }
  return hsic(k_teacher, k_student, centered) / std::sqrt(self_t * self_s);
}

double cka(const GramPair& pair) {
  return cka(pair.k_teacher, pair.k_student, pair.centered);
}

double rcka_loss(const Matrix& teacher_features, const Matrix& student_features) {
  if (teacher_features.rows() != student_features.rows()) {
    throw std::invalid_argument("rcka_loss: token counts differ");
  }
  return 1.0 - cka(gram(teacher_features), gram(student_features));
}

Var rcka_loss_node(Tape& t, const Matrix& teacher_features, Var student_features) {
  const Matrix& vs = t.value(student_features);
  if (teacher_features.rows() != vs.rows()) {
    throw std::invalid_argument("rcka_loss_node: token counts differ");
  }
  // The (n-1)^2 HSIC normalizations cancel inside CKA, so raw traces suffice.
  const Matrix kt = center(gram(teacher_features));
  const double self_t = kt.cwiseProduct(kt).sum();
  if (self_t <= 0.0) {
    throw std::domain_error("rcka_loss_node: teacher representation is degenerate");
  }

  Var vn = row_normalize(t, student_features);
  Var ks = matmul(t, vn, transpose(t, vn));
  Var ks_c = center_rows_cols(t, ks);

  Var cross = dot(t, t.constant(kt), ks_c);  // both symmetric
  Var self_s = dot(t, ks_c, ks_c);
  if (t.scalar(self_s) <= 0.0) {
    throw std::domain_error("rcka_loss_node: student representation is degenerate");
  }
  Var cka_v = divide(t, cross, sqrt_of(t, scale(t, self_s, self_t)));
  return sub(t, t.constant_scalar(1.0), cka_v);
}

}  // namespace grace

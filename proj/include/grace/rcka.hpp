#pragma once

#include "grace/numeric.hpp"
#include "grace/tape.hpp"

namespace grace {

/// n visual-token representations of dimension d, one token per row.
/// Needs n >= 2 and strictly positive row norms.
struct TokenFeatures {
  Matrix rows;  // n x d
  Index token_count() const { return rows.rows(); }
  Index dim() const { return rows.cols(); }
};

/// Teacher/student kernels over the same tokens; `centered` records whether
/// the double-centering projection has been applied.
struct GramPair {
  Matrix k_teacher;
  Matrix k_student;
  bool centered = false;
};

/// Cosine-similarity Gram matrix: row-normalize, then V V^T. Entries lie in
/// [-1, 1] with unit diagonal. A zero-norm row is a domain error naming it.
Matrix gram(const Matrix& features);
inline Matrix gram(const TokenFeatures& f) { return gram(f.rows); }

/// Double-centering H K H with H = I - (1/n) 11^T. Idempotent; zeroes all
/// row and column sums.
Matrix center(const Matrix& k);

/// Tr(centered(ka) * centered(kb)) / (n-1)^2. Inputs are centered on the fly
/// unless `centered` says they already are.
double hsic(const Matrix& ka, const Matrix& kb, bool centered = false);

/// HSIC(K_T, K_S) / sqrt(HSIC(K_T, K_T) HSIC(K_S, K_S)), in [0, 1].
/// A vanishing self-HSIC (constant representation) is a domain error.
double cka(const GramPair& pair);
double cka(const Matrix& k_teacher, const Matrix& k_student, bool centered = false);

/// 1 - CKA of the two feature sets' Gram matrices. Token counts must match;
/// feature dimensions are free to differ.
double rcka_loss(const Matrix& teacher_features, const Matrix& student_features);
inline double rcka_loss(const TokenFeatures& t, const TokenFeatures& s) {
  return rcka_loss(t.rows, s.rows);
}

/// Differentiable RCKA loss; the teacher side is a frozen constant.
Var rcka_loss_node(Tape& t, const Matrix& teacher_features, Var student_features);

}  // namespace grace

#include "grace/distill.hpp"

#include <cmath>
#include <iostream>
#include <limits>

namespace grace {

namespace {

constexpr double kSumTol = 1e-9;

// p * ln(p/q) with the 0 ln 0 := 0 convention; q = 0 under positive p is an
// infinite divergence.
double kl_term(double p, double q) {
  if (p <= 0.0) return 0.0;
  if (q <= 0.0) {
    throw std::domain_error("KL divergence is infinite: zero student mass under positive teacher mass");
  }
  return p * std::log(p / q);
}

void check_pair(const TokenDistribution& pt, const TokenDistribution& ps) {
  validate(pt);
  validate(ps);
  if (pt.probs.size() != ps.probs.size()) {
    throw std::invalid_argument("token pair: vocabulary sizes differ");
  }
  if (pt.target != ps.target) {
    throw std::invalid_argument("token pair: target indices differ");
  }
}

}  // namespace

void validate(const TokenDistribution& p) {
  if (p.probs.size() < 2) {
    throw std::domain_error("TokenDistribution: vocabulary must have at least two classes");
  }
  if (!p.probs.allFinite() || p.probs.minCoeff() < 0.0) {
    throw std::domain_error("TokenDistribution: probabilities must be finite and nonnegative");
  }
  if (std::abs(p.probs.sum() - 1.0) > kSumTol) {
    throw std::domain_error("TokenDistribution: probabilities must sum to one");
  }
  if (p.target < 0 || p.target >= p.probs.size()) {
    throw std::domain_error("TokenDistribution: target index out of range");
  }
}

double entropy(const TokenDistribution& p) {
  validate(p);
  double h = 0.0;
  for (Index v = 0; v < p.probs.size(); ++v) {
    const double pv = p.probs[v];
    if (pv > 0.0) h -= pv * std::log(pv);
  }
  return std::max(0.0, h);
}

double confidence_gate(const TokenDistribution& p) {
  const double h = entropy(p);
  const double log_v = std::log(static_cast<double>(p.probs.size()));
  return std::exp(-h / log_v);
}

double tckd(const TokenDistribution& pt, const TokenDistribution& ps) {
  check_pair(pt, ps);
  const double a = pt.probs[pt.target];
  const double b = ps.probs[ps.target];
  return kl_term(a, b) + kl_term(1.0 - a, 1.0 - b);
}

double nckd(const TokenDistribution& pt, const TokenDistribution& ps) {
  check_pair(pt, ps);
  const double mt = 1.0 - pt.probs[pt.target];
  const double ms = 1.0 - ps.probs[ps.target];
  if (mt < kNonTargetFloor || ms < kNonTargetFloor) {
    throw std::domain_error("nckd: non-target mass below floor, NCKD undefined");
  }
  double kl = 0.0;
  for (Index v = 0; v < pt.probs.size(); ++v) {
    if (v == pt.target) continue;
    kl += kl_term(pt.probs[v] / mt, ps.probs[v] / ms);
  }
  return std::max(0.0, kl);
}

void validate(const DkdWeights& w) {
  if (w.alpha < 0.0 || w.beta_dkd < 0.0 || !(w.temperature > 0.0)) {
    throw std::domain_error("DkdWeights: alpha, beta_dkd must be >= 0 and temperature > 0");
  }
  if (w.beta_dkd <= w.alpha) {
    std::cerr << "warning: beta_dkd <= alpha drops the dark-knowledge emphasis\n";
  }
}

double dkd_per_token(const TokenDistribution& pt, const TokenDistribution& ps,
                     const DkdWeights& w) {
  return w.alpha * tckd(pt, ps) + w.beta_dkd * nckd(pt, ps);
}

GatedBatch make_gated_batch(const Vector& normalized_entropy, const Vector& dkd_loss) {
  if (normalized_entropy.size() != dkd_loss.size() || normalized_entropy.size() == 0) {
    throw std::invalid_argument("make_gated_batch: size mismatch or empty");
  }
  if (normalized_entropy.minCoeff() < 0.0 || normalized_entropy.maxCoeff() > 1.0) {
    throw std::domain_error("make_gated_batch: normalized entropies must lie in [0, 1]");
  }
  GatedBatch b;
  b.token_count = normalized_entropy.size();
  b.normalized_entropy = normalized_entropy;
  b.entropy = normalized_entropy * std::log(2.0);  // nominal two-class vocabulary
  b.dkd_loss = dkd_loss;
  b.gate = (-normalized_entropy.array()).exp();
  b.weight = b.gate / b.gate.sum();
  return b;
}

GdkdResult gdkd(const std::vector<std::pair<TokenDistribution, TokenDistribution>>& tokens,
                const DkdWeights& w) {
  if (tokens.empty()) {
    throw std::domain_error("gdkd: batch must contain at least one valid token");
  }
  const Index n = static_cast<Index>(tokens.size());
  GatedBatch b;
  b.token_count = n;
  b.dkd_loss.resize(n);
  b.entropy.resize(n);
  b.normalized_entropy.resize(n);
  b.gate.resize(n);
  b.weight.resize(n);
  for (Index i = 0; i < n; ++i) {
    const auto& [pt, ps] = tokens[static_cast<size_t>(i)];
    check_pair(pt, ps);
    const double h = entropy(pt);
    const double log_v = std::log(static_cast<double>(pt.probs.size()));
    b.entropy[i] = h;
    b.normalized_entropy[i] = h / log_v;
    b.gate[i] = std::exp(-b.normalized_entropy[i]);

    double loss = w.alpha * tckd(pt, ps);
    const double mt = 1.0 - pt.probs[pt.target];
    const double ms = 1.0 - ps.probs[ps.target];
    if (mt < kNonTargetFloor || ms < kNonTargetFloor) {
      ++b.nckd_skipped;
    } else {
      loss += w.beta_dkd * nckd(pt, ps);
    }
    b.dkd_loss[i] = loss;
  }
  b.weight = b.gate / b.gate.sum();
  GdkdResult r;
  r.batch = std::move(b);
  r.loss = r.batch.weighted_loss();
  return r;
}

Theorem1Decomposition theorem1_decompose(const GatedBatch& batch) {
  const Index n = batch.token_count;
  if (n < 1 || batch.dkd_loss.size() != n || batch.weight.size() != n) {
    throw std::invalid_argument("theorem1_decompose: malformed batch");
  }
  const double nd = static_cast<double>(n);
  Theorem1Decomposition d;
  d.mean = batch.dkd_loss.mean();
  d.gated = batch.weighted_loss();

  const double wbar = 1.0 / nd;
  for (Index i = 0; i < n; ++i) {
    d.covariance += (batch.weight[i] - wbar) * (batch.dkd_loss[i] - d.mean);
  }
  d.covariance /= nd;

  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      d.covariance_pairwise += (batch.weight[i] - batch.weight[j]) *
                               (batch.dkd_loss[i] - batch.dkd_loss[j]);
    }
  }
  d.covariance_pairwise /= 2.0 * nd * nd;

  d.reconstructed = d.mean + nd * d.covariance;
  if (std::abs(d.reconstructed - d.gated) > 1e-10) {
    throw std::logic_error("theorem1_decompose: covariance identity violated");
  }
  if (std::abs(d.covariance - d.covariance_pairwise) > 1e-10) {
    throw std::logic_error("theorem1_decompose: pairwise covariance form disagrees");
  }
  return d;
}

namespace {

void check_rows_sum_to_one(const Matrix& rows, const char* what) {
  for (Index i = 0; i < rows.rows(); ++i) {
    if (rows.row(i).minCoeff() < 0.0 || std::abs(rows.row(i).sum() - 1.0) > kSumTol) {
      throw std::domain_error(std::string(what) + ": row " + std::to_string(i) +
                              " is not a probability distribution");
    }
  }
}

// mutual information of a joint table in nats, exact up to roundoff
double mutual_information(const Matrix& joint) {
  const Vector pa = joint.rowwise().sum();
  const RowVector pb = joint.colwise().sum();
  double mi = 0.0;
  for (Index i = 0; i < joint.rows(); ++i) {
    for (Index j = 0; j < joint.cols(); ++j) {
      const double p = joint(i, j);
      if (p > 0.0) mi += p * std::log(p / (pa[i] * pb[j]));
    }
  }
  return mi;
}

}  // namespace

Proposition1Result proposition1_check(const EnumerableModel& model) {
  const Index nx = model.px.size();
  const Index nv = model.teacher.cols();
  const Index nz = model.decoder.rows();
  if (model.teacher.rows() != nx || static_cast<Index>(model.encoder.size()) != nx) {
    throw std::invalid_argument("proposition1_check: teacher/encoder rows must match |X|");
  }
  if (model.decoder.cols() != nv) {
    throw std::invalid_argument("proposition1_check: decoder vocabulary mismatch");
  }
  if (model.px.minCoeff() < 0.0 || std::abs(model.px.sum() - 1.0) > kSumTol) {
    throw std::domain_error("proposition1_check: px is not a distribution");
  }
  check_rows_sum_to_one(model.teacher, "teacher channel");
  check_rows_sum_to_one(model.decoder, "student decoder");
  for (int z : model.encoder) {
    if (z < 0 || z >= nz) throw std::invalid_argument("proposition1_check: encoder value out of range");
  }

  Matrix joint_xy = Matrix::Zero(nx, nv);
  Matrix joint_zy = Matrix::Zero(nz, nv);
  double expected_kl = 0.0;
  for (Index x = 0; x < nx; ++x) {
    const double w = model.px[x];
    const Index z = model.encoder[static_cast<size_t>(x)];
    joint_xy.row(x) = w * model.teacher.row(x);
    joint_zy.row(z) += w * model.teacher.row(x);
    if (w > 0.0) {
      double kl = 0.0;
      for (Index y = 0; y < nv; ++y) {
        const double p = model.teacher(x, y);
        const double q = model.decoder(z, y);
        if (p > 0.0) {
          if (q <= 0.0) {
            kl = std::numeric_limits<double>::infinity();
            break;
          }
          kl += p * std::log(p / q);
        }
      }
      expected_kl += w * kl;
    }
  }

  Proposition1Result r;
  r.mi_xy = mutual_information(joint_xy);
  r.lhs = mutual_information(joint_zy);
  r.expected_kl = expected_kl;
  r.rhs = r.mi_xy - expected_kl;
  r.slack = r.lhs - r.rhs;
  return r;
}

double fano_error_lower_bound(double conditional_entropy_nats, int k) {
  if (k < 2) throw std::domain_error("fano_error_lower_bound: need at least two classes");
  const double log_k = std::log(static_cast<double>(k));
  if (conditional_entropy_nats < -1e-12 || conditional_entropy_nats > log_k + 1e-12) {
    throw std::domain_error("fano_error_lower_bound: entropy outside [0, ln k]");
  }
  return std::max(0.0, (conditional_entropy_nats - 1.0) / log_k);
}

Var dkd_losses_node(Tape& t, Var student_logits, const Matrix& teacher_probs,
                    const std::vector<int>& targets, const DkdWeights& w) {
  const Matrix& z = t.value(student_logits);
  const Index n = z.rows();
  const Index vocab = z.cols();
  if (teacher_probs.rows() != n || teacher_probs.cols() != vocab ||
      static_cast<Index>(targets.size()) != n) {
    throw std::invalid_argument("dkd_losses_node: shape mismatch");
  }

  // constants derived from the frozen teacher
  Vector a(n);                                    // teacher target probabilities
  Matrix pt_hat = Matrix::Zero(n, vocab);         // renormalized non-target rows
  Vector nt_entropy_term(n);                      // sum pt_hat ln pt_hat
  Vector nckd_mask(n);                            // 0 where NCKD is skipped
  for (Index i = 0; i < n; ++i) {
    const int y = targets[static_cast<size_t>(i)];
    a[i] = teacher_probs(i, y);
    const double mt = 1.0 - a[i];
    if (mt < kNonTargetFloor) {
      nckd_mask[i] = 0.0;
      nt_entropy_term[i] = 0.0;
      continue;
    }
    nckd_mask[i] = 1.0;
    double acc = 0.0;
    for (Index v = 0; v < vocab; ++v) {
      if (v == y) continue;
      const double p = teacher_probs(i, v) / mt;
      pt_hat(i, v) = p;
      if (p > 0.0) acc += p * std::log(p);
    }
    nt_entropy_term[i] = acc;
  }

  Var ls = log_softmax_rows(t, student_logits, w.temperature);
  Var ls_t = select_entries(t, ls, targets);  // n x 1, strictly negative
  Var l1me = log1mexp(t, ls_t);               // log(1 - ps_t)

  Var const_a = t.constant(a);
  Var const_one_minus_a = t.constant((1.0 - a.array()).matrix());
  Var const_ln_a = t.constant(a.array().log().matrix());
  Var const_ln_1ma = t.constant((1.0 - a.array()).log().matrix());

  // TCKD_i = a (ln a - ln b) + (1-a)(ln(1-a) - ln(1-b))
  Var tckd_vec = add(t, hadamard(t, const_a, sub(t, const_ln_a, ls_t)),
                     hadamard(t, const_one_minus_a, sub(t, const_ln_1ma, l1me)));

  // NCKD_i = sum pt_hat ln pt_hat - sum pt_hat ls_v + ln(1 - b)
  Var cross = row_sum(t, hadamard(t, t.constant(pt_hat), ls));
  Var nckd_vec = hadamard(t, t.constant(nckd_mask),
                          add(t, sub(t, t.constant(nt_entropy_term), cross), l1me));

  return add(t, scale(t, tckd_vec, w.alpha), scale(t, nckd_vec, w.beta_dkd));
}

}  // namespace grace

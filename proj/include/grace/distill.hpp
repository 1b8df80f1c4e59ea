#pragma once

#include "grace/numeric.hpp"
#include "grace/tape.hpp"

#include <utility>
#include <vector>

namespace grace {

/// Probability vector over a small vocabulary plus the ground-truth index.
struct TokenDistribution {
  Vector probs;
  Index target = 0;
};

/// Throws std::domain_error unless probs is a valid distribution with at
/// least two classes and target in range. Sum tolerance 1e-9.
void validate(const TokenDistribution& p);

/// Weights of the decoupled distillation loss. beta_dkd > alpha is the
/// recommended regime; violating it is warned about, not rejected.
struct DkdWeights {
  double alpha = 1.0;
  double beta_dkd = 4.0;
  double temperature = 2.0;
};

/// Rejects negative weights / non-positive temperature; warns (stderr) when
/// beta_dkd <= alpha.
void validate(const DkdWeights& w);

/// Per-token records produced by the gated loss; everything the covariance
/// identity reasons about.
struct GatedBatch {
  Vector dkd_loss;            // L_i
  Vector entropy;             // H_i, nats
  Vector normalized_entropy;  // h_i in [0, 1]
  Vector gate;                // g_i = exp(-h_i)
  Vector weight;              // w_i = g_i / sum g_j
  Index token_count = 0;
  Index nckd_skipped = 0;  // tokens whose NCKD was dropped for lack of non-target mass

  double weighted_loss() const { return weight.dot(dkd_loss); }
  double unweighted_mean() const { return dkd_loss.mean(); }
};

/// Assembles a GatedBatch from normalized entropies and per-token losses,
/// deriving gates and weights. Used by property sweeps that do not need
/// full distributions behind the numbers.
GatedBatch make_gated_batch(const Vector& normalized_entropy, const Vector& dkd_loss);

/// Shannon entropy in nats, with 0 ln 0 := 0. Result lies in [0, ln |V|].
double entropy(const TokenDistribution& p);

/// exp(-H(p) / ln |V|), in [exp(-1), 1]; high for confident predictions.
double confidence_gate(const TokenDistribution& p);

/// Binary KL over {target, rest}: KL([pt, 1-pt] || [ps, 1-ps]).
/// A student probability of exactly 0 or 1 where the teacher differs is an
/// infinite divergence and throws rather than clamping.
double tckd(const TokenDistribution& pt, const TokenDistribution& ps);

/// KL between the renormalized non-target distributions. Requires non-target
/// mass above kNonTargetFloor on both sides.
double nckd(const TokenDistribution& pt, const TokenDistribution& ps);

/// alpha * TCKD + beta_dkd * NCKD for one token.
double dkd_per_token(const TokenDistribution& pt, const TokenDistribution& ps,
                     const DkdWeights& w);

inline constexpr double kNonTargetFloor = 1e-12;

struct GdkdResult {
  double loss = 0.0;
  GatedBatch batch;
};

/// Gate-weighted aggregate of per-token DKD losses over the batch. Tokens
/// whose non-target mass falls below kNonTargetFloor keep their TCKD term and
/// skip NCKD (counted in batch.nckd_skipped).
GdkdResult gdkd(const std::vector<std::pair<TokenDistribution, TokenDistribution>>& tokens,
                const DkdWeights& w);

struct Theorem1Decomposition {
  double mean = 0.0;                 // unweighted average of L_i
  double covariance = 0.0;           // (1/N) sum (w_i - 1/N)(L_i - mean)
  double covariance_pairwise = 0.0;  // (1/2N^2) double sum (w_i - w_j)(L_i - L_j)
  double reconstructed = 0.0;        // mean + N * covariance
  double gated = 0.0;                // sum w_i L_i
};

/// Evaluates both covariance forms and checks the exact identity
/// gated = mean + N*Cov against the batch to 1e-10; disagreement throws.
Theorem1Decomposition theorem1_decompose(const GatedBatch& batch);

/// Fully enumerable joint model: finite input domain with marginal px,
/// teacher channel rows P_T(.|x), deterministic encoder z = f(x), and a
/// student decoder with rows P_S(.|z).
struct EnumerableModel {
  Vector px;                 // |X|
  Matrix teacher;            // |X| x |V|
  std::vector<int> encoder;  // |X| entries in [0, |Z|)
  Matrix decoder;            // |Z| x |V|
};

struct Proposition1Result {
  double lhs = 0.0;          // I(Z_S; Y_T)
  double rhs = 0.0;          // I(X; Y_T) - E[KL(P_T || P_S)]
  double slack = 0.0;        // lhs - rhs, nonnegative up to roundoff
  double mi_xy = 0.0;
  double expected_kl = 0.0;
};

/// Exact enumeration of the variational lower bound. Rows that do not sum
/// to one (tolerance 1e-9) are a domain error.
Proposition1Result proposition1_check(const EnumerableModel& model);

/// max(0, (H - 1) / ln k): the simplified rearrangement of Fano's
/// inequality, taken literally in nats (loose for small k).
double fano_error_lower_bound(double conditional_entropy_nats, int k);

// ---- tape composition -------------------------------------------------

/// Per-token DKD losses as a differentiable column vector. `student_logits`
/// is a tracked P x |V| node; teacher probabilities are constants (the
/// teacher is frozen) already at the distillation temperature.
Var dkd_losses_node(Tape& t, Var student_logits, const Matrix& teacher_probs,
                    const std::vector<int>& targets, const DkdWeights& w);

}  // namespace grace

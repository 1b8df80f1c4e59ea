#include "grace/toy.hpp"

#include <cmath>
#include <stdexcept>

namespace grace {

namespace {

Matrix gaussian_matrix(Index rows, Index cols, Rng& rng, double scale) {
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
  }
  return m;
}

Vector flatten_row_major(const Matrix& w, Index padded) {
  Vector flat = Vector::Zero(padded);
  Index k = 0;
  for (Index r = 0; r < w.rows(); ++r) {
    for (Index c = 0; c < w.cols(); ++c) flat[k++] = w(r, c);
  }
  return flat;
}

Index padded_count(Index n, Index g) { return (n + g - 1) / g * g; }

}  // namespace

TaskSpec TaskSpec::make(int vocab, int visual_tokens, int clusters, int feature_dim,
                        int context_dim, int positions, double cluster_spread,
                        double token_noise, Rng& rng) {
  if (clusters < 1 || visual_tokens < clusters) {
    throw std::invalid_argument("TaskSpec: need at least one token per cluster");
  }
  TaskSpec t;
  t.vocab = vocab;
  t.visual_tokens = visual_tokens;
  t.clusters = clusters;
  t.feature_dim = feature_dim;
  t.context_dim = context_dim;
  t.positions = positions;
  t.cluster_spread = cluster_spread;
  t.token_noise = token_noise;
  t.label_visual = gaussian_matrix(vocab, feature_dim, rng, 1.0 / std::sqrt(feature_dim));
  t.label_context = gaussian_matrix(vocab, context_dim, rng, 1.0 / std::sqrt(context_dim));
  t.token_cluster.resize(static_cast<size_t>(visual_tokens));
  for (int j = 0; j < visual_tokens; ++j) {
    t.token_cluster[static_cast<size_t>(j)] = j * clusters / visual_tokens;
  }
  return t;
}

std::vector<Sample> make_dataset(const TaskSpec& task, int count, Rng& rng,
                                 const std::string& mask_mode) {
  if (mask_mode != "all" && mask_mode != "answer_only") {
    throw std::invalid_argument("make_dataset: unknown mask mode " + mask_mode);
  }
  std::vector<Sample> out;
  out.reserve(static_cast<size_t>(count));
  for (int k = 0; k < count; ++k) {
    Sample s;
    Matrix centers = gaussian_matrix(task.clusters, task.feature_dim, rng, task.cluster_spread);
    s.visual.resize(task.visual_tokens, task.feature_dim);
    for (int j = 0; j < task.visual_tokens; ++j) {
      const int c = task.token_cluster[static_cast<size_t>(j)];
      for (int d = 0; d < task.feature_dim; ++d) {
        s.visual(j, d) = centers(c, d) + task.token_noise * rng.normal();
      }
    }
    s.context = gaussian_matrix(task.positions, task.context_dim, rng, 1.0);
    s.query_cluster.resize(static_cast<size_t>(task.positions));
    s.target.resize(static_cast<size_t>(task.positions));
    s.valid.assign(static_cast<size_t>(task.positions), 1);
    for (int p = 0; p < task.positions; ++p) {
      const int c = p % task.clusters;
      s.query_cluster[static_cast<size_t>(p)] = c;
      const Vector logits = task.label_visual * centers.row(c).transpose() +
                            task.label_context * s.context.row(p).transpose();
      Index best;
      logits.maxCoeff(&best);
      s.target[static_cast<size_t>(p)] = static_cast<int>(best);
      if (mask_mode == "answer_only") {
        s.valid[static_cast<size_t>(p)] = p == task.positions - 1 ? 1 : 0;
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

void ToyModel::init(Rng& rng) {
  enc_w.clear();
  enc_b.clear();
  Index in = feature_dim;
  for (int k = 0; k < enc_layers; ++k) {
    enc_w.push_back(gaussian_matrix(hidden, in, rng, 1.0 / std::sqrt(static_cast<double>(in))));
    enc_b.push_back(RowVector::Zero(hidden));
    in = hidden;
  }
  wv = gaussian_matrix(hidden, hidden, rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
  wu = gaussian_matrix(hidden, context_dim, rng, 1.0 / std::sqrt(static_cast<double>(context_dim)));
  bc = RowVector::Zero(hidden);
  wh = gaussian_matrix(vocab, hidden, rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
  bh = RowVector::Zero(vocab);
  quantized = false;
  thetas.clear();
}

void ToyModel::attach_quantization(const QuantConfig& cfg) {
  cfg.validate();
  qcfg = cfg;
  quantized = true;
  thetas.clear();
  for (const Matrix* w : std::as_const(*this).weights()) {
    const Index padded = padded_count(w->size(), cfg.group_size);
    thetas.push_back(init_scales(flatten_row_major(*w, padded), cfg));
  }
}

std::vector<Matrix*> ToyModel::weights() {
  std::vector<Matrix*> out;
  for (Matrix& w : enc_w) out.push_back(&w);
  out.push_back(&wv);
  out.push_back(&wu);
  out.push_back(&wh);
  return out;
}

std::vector<const Matrix*> ToyModel::weights() const {
  std::vector<const Matrix*> out;
  for (const Matrix& w : enc_w) out.push_back(&w);
  out.push_back(&wv);
  out.push_back(&wu);
  out.push_back(&wh);
  return out;
}

std::vector<RowVector*> ToyModel::biases() {
  std::vector<RowVector*> out;
  for (RowVector& b : enc_b) out.push_back(&b);
  out.push_back(&bc);
  out.push_back(&bh);
  return out;
}

int ToyModel::tap_encoder_index() const {
  // the whole stack is enc_1 .. enc_E, combine; -2 is the last encoder output
  const int idx = enc_layers + hidden_tap + 1;
  if (idx < 0 || idx >= enc_layers) {
    throw std::invalid_argument("ToyModel: hidden_tap does not name an encoder layer");
  }
  return idx;
}

Matrix ToyModel::effective_weight(size_t i) const {
  const Matrix& w = *std::as_const(*this).weights()[i];
  if (!quantized) return w;
  QuantizedTensor q;
  q.d_out = w.rows();
  q.d_in = w.cols();
  q.true_count = w.size();
  q.group_size = qcfg.group_size;
  q.weights = flatten_row_major(w, padded_count(w.size(), qcfg.group_size));
  q.thetas = thetas[i];
  return q.dequantized(qcfg);
}

ToyModel::Forward ToyModel::forward_batch(const TaskSpec& task,
                                          const std::vector<const Sample*>& batch) const {
  const int b = static_cast<int>(batch.size());
  const int n = task.visual_tokens;
  const int p = task.positions;
  Forward f;

  Matrix h(b * n, feature_dim);
  for (int s = 0; s < b; ++s) h.middleRows(s * n, n) = batch[static_cast<size_t>(s)]->visual;

  const int tap = tap_encoder_index();
  size_t wi = 0;
  for (int k = 0; k < enc_layers; ++k, ++wi) {
    h = ((h * effective_weight(wi).transpose()).rowwise() + enc_b[static_cast<size_t>(k)]).array().tanh();
    if (k == tap) f.tap_all = h;
  }

  Matrix pool(b * p, hidden);
  Matrix context(b * p, context_dim);
  f.targets.resize(static_cast<size_t>(b * p));
  f.valid.resize(static_cast<size_t>(b * p));
  for (int s = 0; s < b; ++s) {
    const Sample& smp = *batch[static_cast<size_t>(s)];
    for (int q = 0; q < p; ++q) {
      RowVector acc = RowVector::Zero(hidden);
      int count = 0;
      for (int j = 0; j < n; ++j) {
        if (task.token_cluster[static_cast<size_t>(j)] == smp.query_cluster[static_cast<size_t>(q)]) {
          acc += h.row(s * n + j);
          ++count;
        }
      }
      pool.row(s * p + q) = acc / count;
      context.row(s * p + q) = smp.context.row(q);
      f.targets[static_cast<size_t>(s * p + q)] = smp.target[static_cast<size_t>(q)];
      f.valid[static_cast<size_t>(s * p + q)] = smp.valid[static_cast<size_t>(q)];
    }
  }

  const Matrix combined =
      ((pool * effective_weight(wi).transpose() + context * effective_weight(wi + 1).transpose())
           .rowwise() + bc)
          .array()
          .tanh();
  f.logits = (combined * effective_weight(wi + 2).transpose()).rowwise() + bh;
  return f;
}

ToyModel::TapeForward ToyModel::forward_batch_tape(Tape& t, const TaskSpec& task,
                                                   const std::vector<const Sample*>& batch) const {
  const int b = static_cast<int>(batch.size());
  const int n = task.visual_tokens;
  const int p = task.positions;
  TapeForward f;

  auto weight_leaf = [&](size_t i) -> Var {
    const Matrix& w = *weights()[i];
    if (quantized) {
      return t.leaf(flatten_row_major(w, padded_count(w.size(), qcfg.group_size)));
    }
    return t.leaf(w);
  };
  auto linear = [&](Var x, size_t i) -> Var {
    const Matrix& w = *weights()[i];
    if (quantized) {
      return quantized_linear_node(t, x, f.weight_leaves[i], f.theta_leaves[i],
                                   w.rows(), w.cols(), qcfg);
    }
    return matmul(t, x, transpose(t, f.weight_leaves[i]));
  };

  const size_t n_weights = weights().size();
  for (size_t i = 0; i < n_weights; ++i) {
    f.weight_leaves.push_back(weight_leaf(i));
    if (quantized) f.theta_leaves.push_back(t.leaf(thetas[i]));
  }
  for (RowVector* bias : const_cast<ToyModel*>(this)->biases()) {
    f.bias_leaves.push_back(t.leaf(*bias));
  }

  Matrix v_all(b * n, feature_dim);
  for (int s = 0; s < b; ++s) v_all.middleRows(s * n, n) = batch[static_cast<size_t>(s)]->visual;
  Var h = t.constant(std::move(v_all));

  const int tap = tap_encoder_index();
  size_t wi = 0;
  for (int k = 0; k < enc_layers; ++k, ++wi) {
    h = tanh_of(t, add_row_broadcast(t, linear(h, wi), f.bias_leaves[static_cast<size_t>(k)]));
    if (k == tap) f.tap_all = h;
  }

  std::vector<std::vector<int>> groups(static_cast<size_t>(b * p));
  Matrix context(b * p, context_dim);
  f.targets.resize(static_cast<size_t>(b * p));
  f.valid.resize(static_cast<size_t>(b * p));
  for (int s = 0; s < b; ++s) {
    const Sample& smp = *batch[static_cast<size_t>(s)];
    for (int q = 0; q < p; ++q) {
      auto& g = groups[static_cast<size_t>(s * p + q)];
      for (int j = 0; j < n; ++j) {
        if (task.token_cluster[static_cast<size_t>(j)] == smp.query_cluster[static_cast<size_t>(q)]) {
          g.push_back(s * n + j);
        }
      }
      context.row(s * p + q) = smp.context.row(q);
      f.targets[static_cast<size_t>(s * p + q)] = smp.target[static_cast<size_t>(q)];
      f.valid[static_cast<size_t>(s * p + q)] = smp.valid[static_cast<size_t>(q)];
    }
  }

  Var pool = pool_rows(t, h, groups);
  Var pre = add(t, linear(pool, wi), linear(t.constant(std::move(context)), wi + 1));
  Var combined = tanh_of(t, add_row_broadcast(t, pre, f.bias_leaves[static_cast<size_t>(enc_layers)]));
  f.logits = add_row_broadcast(t, linear(combined, wi + 2),
                               f.bias_leaves[static_cast<size_t>(enc_layers) + 1]);
  return f;
}

void ToyModel::sgd_step(const Tape& t, const TapeForward& f, double lr_w, double lr_s) {
  const auto ws = weights();
  for (size_t i = 0; i < ws.size(); ++i) {
    Matrix& w = *ws[i];
    const Matrix& g = t.grad(f.weight_leaves[i]);
    if (quantized) {
      Index k = 0;  // flat gradient laid out row-major; padded tail is ignored
      for (Index r = 0; r < w.rows(); ++r) {
        for (Index c = 0; c < w.cols(); ++c) w(r, c) -= lr_w * g(k++, 0);
      }
      Vector& th = thetas[i];
      th -= lr_s * t.grad(f.theta_leaves[i]).col(0);
    } else {
      w -= lr_w * g;
    }
  }
  const auto bs = biases();
  for (size_t i = 0; i < bs.size(); ++i) {
    *bs[i] -= lr_w * t.grad(f.bias_leaves[i]).row(0);
  }
}

double cluster_similarity_gap(const Matrix& features, const std::vector<int>& token_cluster) {
  if (features.rows() != static_cast<Index>(token_cluster.size())) {
    throw std::invalid_argument("cluster_similarity_gap: label count mismatch");
  }
  const Matrix k = gram(features);
  double within = 0.0, between = 0.0;
  long nw = 0, nb = 0;
  for (Index i = 0; i < k.rows(); ++i) {
    for (Index j = i + 1; j < k.cols(); ++j) {
      if (token_cluster[static_cast<size_t>(i)] == token_cluster[static_cast<size_t>(j)]) {
        within += k(i, j);
        ++nw;
      } else {
        between += k(i, j);
        ++nb;
      }
    }
  }
  if (nw == 0 || nb == 0) throw std::domain_error("cluster_similarity_gap: degenerate partition");
  return within / static_cast<double>(nw) - between / static_cast<double>(nb);
}

}  // namespace grace

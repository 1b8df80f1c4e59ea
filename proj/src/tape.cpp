#include "grace/tape.hpp"

#include <cmath>

namespace grace {

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

}  // namespace

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || v.id >= size()) throw std::invalid_argument("tape: invalid node handle");
  return nodes_[static_cast<size_t>(v.id)];
}

Tape::Node& Tape::node(Var v) {
  if (!v.valid() || v.id >= size()) throw std::invalid_argument("tape: invalid node handle");
  return nodes_[static_cast<size_t>(v.id)];
}

Var Tape::leaf(Matrix value, bool tracked) {
  require_finite(value, "tape leaf");
  Node n;
  n.grad = Matrix::Zero(value.rows(), value.cols());
  n.value = std::move(value);
  n.tracked = tracked;
  nodes_.push_back(std::move(n));
  return Var{size() - 1};
}

double Tape::scalar(Var v) const {
  const Matrix& m = value(v);
  if (m.rows() != 1 || m.cols() != 1) {
    throw std::invalid_argument("tape: node is not scalar-valued");
  }
  return m(0, 0);
}

Var Tape::emit(Matrix value, const std::vector<Var>& inputs, BackwardFn fn) {
  require_finite(value, "tape node");
  bool tracked = false;
  for (Var in : inputs) tracked = tracked || node(in).tracked;
  Node n;
  n.grad = Matrix::Zero(value.rows(), value.cols());
  n.value = std::move(value);
  n.inputs = inputs;
  n.tracked = tracked;
  if (tracked) n.backward = std::move(fn);  // untracked nodes never propagate
  nodes_.push_back(std::move(n));
  return Var{size() - 1};
}

void Tape::add_grad(Var v, const Matrix& g) {
  Node& n = node(v);
  if (!n.tracked) return;
  check_same_shape(n.grad, g, "add_grad");
  n.grad += g;
}

void Tape::zero_grads() {
  for (Node& n : nodes_) n.grad.setZero();
}

void Tape::backward(Var output) {
  const Node& out = node(output);
  if (out.value.rows() != 1 || out.value.cols() != 1) {
    throw std::invalid_argument("backward: output must be scalar (1x1)");
  }
  zero_grads();
  node(output).grad(0, 0) = 1.0;
  for (int i = output.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.tracked || !n.backward) continue;
    if (n.grad.isZero(0.0)) continue;
    n.backward(*this, Var{i}, n.grad);
  }
}

// ---- primitive operations -------------------------------------------------

Var add(Tape& t, Var a, Var b) {
  check_same_shape(t.value(a), t.value(b), "add");
  return t.emit(t.value(a) + t.value(b), {a, b},
                [a, b](Tape& t, Var, const Matrix& g) {
                  t.add_grad(a, g);
                  t.add_grad(b, g);
                });
}

Var sub(Tape& t, Var a, Var b) {
  check_same_shape(t.value(a), t.value(b), "sub");
  return t.emit(t.value(a) - t.value(b), {a, b},
                [a, b](Tape& t, Var, const Matrix& g) {
                  t.add_grad(a, g);
                  t.add_grad(b, -g);
                });
}

Var hadamard(Tape& t, Var a, Var b) {
  check_same_shape(t.value(a), t.value(b), "hadamard");
  return t.emit(t.value(a).cwiseProduct(t.value(b)), {a, b},
                [a, b](Tape& t, Var, const Matrix& g) {
                  t.add_grad(a, g.cwiseProduct(t.value(b)));
                  t.add_grad(b, g.cwiseProduct(t.value(a)));
                });
}

Var divide(Tape& t, Var a, Var b) {
  check_same_shape(t.value(a), t.value(b), "divide");
  return t.emit(t.value(a).cwiseQuotient(t.value(b)), {a, b},
                [a, b](Tape& t, Var self, const Matrix& g) {
                  const Matrix& bv = t.value(b);
                  t.add_grad(a, g.cwiseQuotient(bv));
                  t.add_grad(b, -g.cwiseProduct(t.value(self)).cwiseQuotient(bv));
                });
}

Var matmul(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.cols() != bv.rows()) {
    throw std::invalid_argument("matmul: inner dimensions differ (" +
                                std::to_string(av.cols()) + " vs " +
                                std::to_string(bv.rows()) + ")");
  }
  return t.emit(av * bv, {a, b}, [a, b](Tape& t, Var, const Matrix& g) {
    t.add_grad(a, g * t.value(b).transpose());
    t.add_grad(b, t.value(a).transpose() * g);
  });
}

Var transpose(Tape& t, Var a) {
  return t.emit(t.value(a).transpose(), {a},
                [a](Tape& t, Var, const Matrix& g) { t.add_grad(a, g.transpose()); });
}

Var scale(Tape& t, Var a, double c) {
  return t.emit(t.value(a) * c, {a},
                [a, c](Tape& t, Var, const Matrix& g) { t.add_grad(a, g * c); });
}

Var add_const(Tape& t, Var a, double c) {
  return t.emit(t.value(a).array() + c, {a},
                [a](Tape& t, Var, const Matrix& g) { t.add_grad(a, g); });
}

Var tanh_of(Tape& t, Var a) {
  return t.emit(t.value(a).array().tanh(), {a},
                [a](Tape& t, Var self, const Matrix& g) {
                  const auto y = t.value(self).array();
                  t.add_grad(a, (g.array() * (1.0 - y * y)).matrix());
                });
}

Var exp_of(Tape& t, Var a) {
  return t.emit(t.value(a).array().exp(), {a},
                [a](Tape& t, Var self, const Matrix& g) {
                  t.add_grad(a, g.cwiseProduct(t.value(self)));
                });
}

Var log_of(Tape& t, Var a) {
  return t.emit(t.value(a).array().log(), {a},
                [a](Tape& t, Var, const Matrix& g) {
                  t.add_grad(a, g.cwiseQuotient(t.value(a)));
                });
}

Var log1mexp(Tape& t, Var a) {
  // log(1 - exp(x)) for x < 0; the two branches keep precision on both ends
  const Matrix& x = t.value(a);
  Matrix y(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const double xi = x(i);
    if (!(xi < 0.0)) throw std::domain_error("log1mexp: argument must be negative");
    y(i) = xi > -M_LN2 ? std::log(-std::expm1(xi)) : std::log1p(-std::exp(xi));
  }
  return t.emit(std::move(y), {a}, [a](Tape& t, Var self, const Matrix& g) {
    // d/dx log(1-exp(x)) = -exp(x)/(1-exp(x)) = -exp(x - y)
    const Matrix d = -(t.value(a) - t.value(self)).array().exp();
    t.add_grad(a, g.cwiseProduct(d));
  });
}

Var sqrt_of(Tape& t, Var a) {
  return t.emit(t.value(a).array().sqrt(), {a},
                [a](Tape& t, Var self, const Matrix& g) {
                  t.add_grad(a, (g.array() / (2.0 * t.value(self).array())).matrix());
                });
}

Var sum(Tape& t, Var a) {
  return t.emit(Matrix::Constant(1, 1, t.value(a).sum()), {a},
                [a](Tape& t, Var, const Matrix& g) {
                  const Matrix& av = t.value(a);
                  t.add_grad(a, Matrix::Constant(av.rows(), av.cols(), g(0, 0)));
                });
}

Var row_sum(Tape& t, Var a) {
  return t.emit(t.value(a).rowwise().sum(), {a},
                [a](Tape& t, Var, const Matrix& g) {
                  t.add_grad(a, g * Matrix::Ones(1, t.value(a).cols()));
                });
}

Var dot(Tape& t, Var a, Var b) { return sum(t, hadamard(t, a, b)); }

Var add_row_broadcast(Tape& t, Var m, Var row) {
  const Matrix& mv = t.value(m);
  const Matrix& rv = t.value(row);
  if (rv.rows() != 1 || rv.cols() != mv.cols()) {
    throw std::invalid_argument("add_row_broadcast: row shape mismatch");
  }
  return t.emit(mv.rowwise() + rv.row(0), {m, row},
                [m, row](Tape& t, Var, const Matrix& g) {
                  t.add_grad(m, g);
                  t.add_grad(row, g.colwise().sum());
                });
}

Var select_entries(Tape& t, Var m, const std::vector<int>& cols) {
  const Matrix& mv = t.value(m);
  if (static_cast<Index>(cols.size()) != mv.rows()) {
    throw std::invalid_argument("select_entries: one column index per row required");
  }
  Matrix out(mv.rows(), 1);
  for (Index i = 0; i < mv.rows(); ++i) {
    const int c = cols[static_cast<size_t>(i)];
    if (c < 0 || c >= mv.cols()) throw std::invalid_argument("select_entries: index out of range");
    out(i, 0) = mv(i, c);
  }
  return t.emit(std::move(out), {m}, [m, cols](Tape& t, Var, const Matrix& g) {
    const Matrix& mv = t.value(m);
    Matrix gm = Matrix::Zero(mv.rows(), mv.cols());
    for (Index i = 0; i < mv.rows(); ++i) gm(i, cols[static_cast<size_t>(i)]) = g(i, 0);
    t.add_grad(m, gm);
  });
}

Var pool_rows(Tape& t, Var m, const std::vector<std::vector<int>>& groups) {
  const Matrix& mv = t.value(m);
  Matrix out(static_cast<Index>(groups.size()), mv.cols());
  for (size_t p = 0; p < groups.size(); ++p) {
    if (groups[p].empty()) throw std::invalid_argument("pool_rows: empty group");
    RowVector acc = RowVector::Zero(mv.cols());
    for (int r : groups[p]) {
      if (r < 0 || r >= mv.rows()) throw std::invalid_argument("pool_rows: row index out of range");
      acc += mv.row(r);
    }
    out.row(static_cast<Index>(p)) = acc / static_cast<double>(groups[p].size());
  }
  return t.emit(std::move(out), {m}, [m, groups](Tape& t, Var, const Matrix& g) {
    const Matrix& mv = t.value(m);
    Matrix gm = Matrix::Zero(mv.rows(), mv.cols());
    for (size_t p = 0; p < groups.size(); ++p) {
      const double inv = 1.0 / static_cast<double>(groups[p].size());
      for (int r : groups[p]) gm.row(r) += g.row(static_cast<Index>(p)) * inv;
    }
    t.add_grad(m, gm);
  });
}

Var row_normalize(Tape& t, Var m) {
  const Matrix& mv = t.value(m);
  Matrix out(mv.rows(), mv.cols());
  for (Index i = 0; i < mv.rows(); ++i) {
    const double n = mv.row(i).norm();
    if (n <= 0.0) {
      throw std::domain_error("row_normalize: zero-norm row " + std::to_string(i));
    }
    out.row(i) = mv.row(i) / n;
  }
  return t.emit(std::move(out), {m}, [m](Tape& t, Var self, const Matrix& g) {
    const Matrix& mv = t.value(m);
    const Matrix& y = t.value(self);
    Matrix gm(mv.rows(), mv.cols());
    for (Index i = 0; i < mv.rows(); ++i) {
      const double n = mv.row(i).norm();
      const double proj = g.row(i).dot(y.row(i));
      gm.row(i) = (g.row(i) - proj * y.row(i)) / n;
    }
    t.add_grad(m, gm);
  });
}

Var center_rows_cols(Tape& t, Var k) {
  const Matrix& kv = t.value(k);
  if (kv.rows() != kv.cols()) {
    throw std::invalid_argument("center_rows_cols: matrix must be square");
  }
  auto center = [](const Matrix& a) -> Matrix {
    const Vector rm = a.rowwise().mean();
    const RowVector cm = a.colwise().mean();
    const double gm = a.mean();
    return ((a.colwise() - rm).rowwise() - cm).array() + gm;
  };
  return t.emit(center(kv), {k}, [k, center](Tape& t, Var, const Matrix& g) {
    // HKH is self-adjoint: the pullback is centering the upstream gradient
    t.add_grad(k, center(g));
  });
}

Var log_softmax_rows(Tape& t, Var logits, double temperature) {
  const Matrix& z = t.value(logits);
  if (z.cols() == 0) throw std::invalid_argument("log_softmax_rows: empty rows");
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("log_softmax_rows: temperature must be positive");
  }
  Matrix out(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    out.row(i) = log_softmax(z.row(i), temperature);
  }
  return t.emit(std::move(out), {logits},
                [logits, temperature](Tape& t, Var self, const Matrix& g) {
                  const Matrix p = t.value(self).array().exp();
                  Matrix gz(g.rows(), g.cols());
                  for (Index i = 0; i < g.rows(); ++i) {
                    gz.row(i) = (g.row(i) - g.row(i).sum() * p.row(i)) / temperature;
                  }
                  t.add_grad(logits, gz);
                });
}

}  // namespace grace

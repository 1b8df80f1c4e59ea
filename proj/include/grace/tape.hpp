#pragma once

#include "grace/numeric.hpp"

#include <functional>
#include <vector>

namespace grace {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Append-only list of matrix-valued operations with reverse-mode gradients.
///
/// Nodes are recorded in topological order (inputs always precede users) and
/// backward() visits them exactly once in reverse insertion order, so replay
/// is deterministic. One tape per worker; matrices handed out are immutable.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var self, const Matrix& upstream)>;

  Var leaf(Matrix value, bool tracked = true);
  Var constant(Matrix value) { return leaf(std::move(value), false); }
  Var constant_scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

  const Matrix& value(Var v) const { return node(v).value; }
  double scalar(Var v) const;
  const Matrix& grad(Var v) const { return node(v).grad; }
  bool tracked(Var v) const { return node(v).tracked; }
  int size() const { return static_cast<int>(nodes_.size()); }

  /// Reverse pass from a 1x1 output; fills grad() for every tracked node.
  void backward(Var output);
  void zero_grads();

  /// Appends a computed node. `fn` receives the node's accumulated upstream
  /// gradient and is responsible for routing it into the inputs via add_grad.
  Var emit(Matrix value, const std::vector<Var>& inputs, BackwardFn fn);
  void add_grad(Var v, const Matrix& g);
  const std::vector<Var>& inputs(Var v) const { return node(v).inputs; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<Var> inputs;
    BackwardFn backward;
    bool tracked = false;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::vector<Node> nodes_;
};

// ---- primitive operations -------------------------------------------------
// Each records itself on the tape when any input is tracked; shape mismatches
// throw std::invalid_argument.

Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var hadamard(Tape& t, Var a, Var b);
Var divide(Tape& t, Var a, Var b);  // elementwise a / b
Var matmul(Tape& t, Var a, Var b);
Var transpose(Tape& t, Var a);
Var scale(Tape& t, Var a, double c);
Var add_const(Tape& t, Var a, double c);
Var tanh_of(Tape& t, Var a);
Var exp_of(Tape& t, Var a);
Var log_of(Tape& t, Var a);
Var log1mexp(Tape& t, Var a);  // log(1 - exp(x)) for x < 0
Var sqrt_of(Tape& t, Var a);
Var sum(Tape& t, Var a);      // 1x1
Var row_sum(Tape& t, Var a);  // column vector of row sums
Var dot(Tape& t, Var a, Var b);

/// Adds a row vector to every row of a matrix (bias broadcast).
Var add_row_broadcast(Tape& t, Var m, Var row);

/// Picks m(i, cols[i]) for each row into an n x 1 column.
Var select_entries(Tape& t, Var m, const std::vector<int>& cols);

/// Row p of the output is the mean of the input rows listed in groups[p].
Var pool_rows(Tape& t, Var m, const std::vector<std::vector<int>>& groups);

/// Scales every row to unit L2 norm; rows with zero norm are a domain error.
Var row_normalize(Tape& t, Var m);

/// Double-centers a square kernel: K - row means - column means + grand mean.
Var center_rows_cols(Tape& t, Var k);

/// Row-wise log softmax at the given temperature.
Var log_softmax_rows(Tape& t, Var logits, double temperature);

}  // namespace grace

#pragma once

// Reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Tape records primitive operations in topological order. Every node keeps
// its forward value, a pure forward functor (used for replay checks) and a
// backward functor that accumulates adjoints into its inputs. Tensors are
// rank <= 2; scalars are 1x1 matrices and vectors are n x 1 columns.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace sivi::ad {

using Tensor = Eigen::MatrixXd;
using Index = Eigen::Index;

enum class OpKind {
  Leaf,
  Constant,
  Add,
  Subtract,
  Multiply,
  Divide,
  MatMul,
  Exp,
  Log,
  Relu,
  Softplus,
  Sum,
  LogGamma,
  Cholesky,
  TriSolve,
  Sqrt,
  Negate,
  Scale,
  AddConstant,
  Square,
  ClampMax,
  Transpose,
  Block,
  ConcatCols,
  Broadcast,
  RowSum,
  Diagonal,
  LogSumExpRows,
  ColumnTransform,
  CovMatrix,
  VecchiaLogDensity,
  InvGammaQuantile,
};

const char* to_string(OpKind kind);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NotPositiveDefinite : public std::runtime_error {
 public:
  NotPositiveDefinite(Index pivot, const std::string& what)
      : std::runtime_error(what), pivot_(pivot) {}
  Index pivot() const { return pivot_; }

 private:
  Index pivot_;
};

class Tape;
class GradientMap;

/// Handle to a node on a tape. Cheap to copy.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  double item() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  int id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

using ForwardFn = std::function<Tensor(const std::vector<const Tensor*>&)>;
// Receives the output adjoint, the output value, the input values and one
// accumulator per input (nullptr when that input needs no gradient).
using BackwardFn =
    std::function<void(const Tensor& out_adj, const Tensor& out_value,
                       const std::vector<const Tensor*>& inputs,
                       const std::vector<Tensor*>& in_adj)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  Var constant(Tensor value);
  Var scalar_constant(double v) { return constant(Tensor::Constant(1, 1, v)); }

  Var record(OpKind kind, std::vector<Var> inputs, ForwardFn forward,
             BackwardFn backward);

  const Tensor& value(int id) const { return nodes_.at(id).value; }
  OpKind kind(int id) const { return nodes_.at(id).kind; }
  const std::vector<int>& inputs(int id) const { return nodes_.at(id).inputs; }
  bool is_leaf(int id) const { return nodes_.at(id).kind == OpKind::Leaf; }
  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Recomputes every non-leaf node from its inputs and compares bitwise
  /// with the recorded value. Returns the first divergent node id or -1.
  int replay_divergence() const;

 private:
  friend class GradientMap;
  friend GradientMap backward(const Tape& tape, Var seed, bool verify_replay);

  struct Node {
    OpKind kind;
    std::vector<int> inputs;
    Tensor value;
    ForwardFn forward;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

/// Per-leaf gradients. Leaves never reached by the backward pass report a
/// zero tensor of the leaf's shape.
class GradientMap {
 public:
  GradientMap() = default;
  GradientMap(const Tape* tape, std::unordered_map<int, Tensor> grads)
      : tape_(tape), grads_(std::move(grads)) {}

  Tensor operator[](const Var& leaf) const;
  bool contains(const Var& leaf) const { return grads_.count(leaf.id()) > 0; }

 private:
  const Tape* tape_ = nullptr;
  std::unordered_map<int, Tensor> grads_;
};

class ReplayDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reverse pass from a scalar output. With `verify_replay` the tape is
/// replayed first and a divergence raises ReplayDivergence.
GradientMap backward(const Tape& tape, Var seed, bool verify_replay = false);

// Elementwise (shapes must agree exactly).
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator-(Var a);
Var cwise_mul(Var a, Var b);
Var cwise_div(Var a, Var b);

// Scalar constants.
Var scale(Var x, double s);
Var add_constant(Var x, double c);
Var operator*(double s, Var x);
Var operator+(Var x, double c);
Var operator-(Var x, double c);

Var exp(Var x);
Var log(Var x);
Var sqrt(Var x);
Var square(Var x);
Var relu(Var x);
Var softplus(Var x);
Var lgamma(Var x);
/// min(x, cap); gradient is zero where the cap is active.
Var clamp_max(Var x, double cap);

Var matmul(Var a, Var b);
Var transpose(Var x);
Var sum(Var x);
Var row_sum(Var x);
Var diagonal(Var x);
Var block(Var x, Index row, Index col, Index rows, Index cols);
inline Var row(Var x, Index r) { return block(x, r, 0, 1, x.cols()); }
inline Var col(Var x, Index c) { return block(x, 0, c, x.rows(), 1); }
Var concat_cols(const std::vector<Var>& parts);
/// Replicates a 1x1, 1xc or rx1 tensor to rows x cols.
Var broadcast_to(Var x, Index rows, Index cols);
/// Row-wise log(sum(exp(.))): r x c -> r x 1.
Var logsumexp_rows(Var x);

/// Lower Cholesky factor of sym(A) = (A + A^T)/2. On failure adds
/// 1e-8 * mean(diag) once and retries before throwing NotPositiveDefinite.
Var cholesky(Var a);
/// Solves L X = B for lower-triangular L (only the lower triangle is read).
Var tri_solve(Var lower, Var b);

/// Plain-value Cholesky with the same jitter policy.
Eigen::MatrixXd cholesky_factor(const Eigen::MatrixXd& a);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamMoments {
  std::vector<Tensor> first;
  std::vector<Tensor> second;
};

class Diverged : public std::runtime_error {
 public:
  Diverged(long iteration, const std::string& what)
      : std::runtime_error(what), iteration_(iteration) {}
  long iteration() const { return iteration_; }

 private:
  long iteration_;
};

/// One Adam ascent step (the objective is maximized) with bias correction.
/// `step_index` starts at 1.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
               AdamMoments& moments, long step_index, const AdamOptions& opt);

/// Plain gradient ascent: params += learning_rate * grads.
void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
              long step_index, double learning_rate);

}  // namespace sivi::ad

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "fedmap/types.hpp"

/// Reverse-mode automatic differentiation over scalar-rooted graphs of dense
/// matrices. A Tape is built once, then evaluated with `forward` as many times
/// as needed; `backward` returns the gradient of the root with respect to each
/// declared input, in declaration order.
namespace fedmap::ad {

struct Var {
  std::size_t id = 0;
};

class Tape {
 public:
  enum class Op {
    Input,
    Constant,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Affine,
    Relu,
    Softplus,
    Square,
    Log,
    Exp,
    Sum,
    Concat,
    Slice,
    LogSumExpCols,
    Pick,
    RiskSetLogSumExp,
  };

  /// Declares an input slot whose value is supplied to `forward`.
  Var input(Index rows, Index cols = 1);
  Var constant(MatrixXd value);
  Var scalar_constant(double value);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  /// Elementwise product.
  Var mul(Var a, Var b);
  Var scale(Var a, double factor);
  Var matmul(Var a, Var b);
  /// W x + b with b (rows x 1) broadcast over the columns of x.
  Var affine(Var w, Var x, Var b);
  Var relu(Var a);
  /// log(1 + e^x), evaluated as log1p(exp(-|x|)) + max(x, 0).
  Var softplus(Var a);
  Var square(Var a);
  Var log(Var a);
  Var exp(Var a);
  /// Sum of all entries, 1 x 1.
  Var sum(Var a);
  /// Vertical stack; all parts share a column count.
  Var concat(std::span<const Var> parts);
  Var concat(std::initializer_list<Var> parts);
  /// Views the contiguous column-major segment [offset, offset + rows*cols)
  /// of `a` as a rows x cols matrix.
  Var slice(Var a, Index offset, Index rows, Index cols = 1);
  /// Column-wise log-sum-exp of a C x n matrix, 1 x n.
  Var log_sum_exp_cols(Var a);
  /// Picks a(rows[j], j) for every column j, 1 x n.
  Var pick(Var a, std::vector<Index> rows);
  /// For a 1 x n row of log-hazards, out_i = log sum_{j : t_j >= t_i} exp(a_j).
  Var risk_set_log_sum_exp(Var a, Eigen::VectorXd times);

  Var squared_norm(Var a) { return sum(square(a)); }
  Var mean(Var a);

  /// Evaluates every node in recording order and returns the root value.
  /// Inputs bind to declared input slots in declaration order.
  double forward(std::span<const MatrixXd> inputs);
  double forward(std::initializer_list<Eigen::Ref<const MatrixXd>> inputs);
  /// Gradient of the root with respect to each input, in declaration order.
  std::vector<MatrixXd> backward();

  /// The root is the most recently recorded node unless set explicitly.
  void set_root(Var v);
  const MatrixXd& value(Var v) const;
  double root_value() const;
  std::size_t size() const { return nodes_.size(); }
  std::size_t num_inputs() const { return inputs_.size(); }
  /// Drops cached values and adjoints; the recorded graph is kept.
  void reset();

 private:
  struct Node {
    Op op = Op::Input;
    std::vector<std::size_t> args;
    Index rows = 0;
    Index cols = 0;
    double scalar = 0.0;
    Index offset = 0;
    std::vector<Index> indices;
    Eigen::VectorXd aux;
    MatrixXd value;
    MatrixXd adjoint;
  };

  static Node make_node(Op op, std::vector<std::size_t> args, Index rows, Index cols) {
    Node n;
    n.op = op;
    n.args = std::move(args);
    n.rows = rows;
    n.cols = cols;
    return n;
  }
  Var push(Node node);
  const Node& at(Var v) const;
  void evaluate(Node& node);
  void propagate(const Node& node);

  std::vector<Node> nodes_;
  std::vector<std::size_t> inputs_;
  std::size_t root_ = 0;
  bool has_root_ = false;
  bool evaluated_ = false;
};

struct ValueAndGradient {
  double value = 0.0;
  ParamVector gradient;
};

using GradientFunction = std::function<ValueAndGradient(const ParamVector&)>;

struct GradientCheck {
  double max_relative_error = 0.0;
  Index worst_index = -1;
};

/// Compares `fn`'s gradient at x against central differences with step h.
/// Per-coordinate error is |g - fd| / max(|g|, |fd|, floor).
/// Throws NumericalError naming the coordinate if fn is non-finite anywhere
/// on the stencil.
GradientCheck check_gradient(const GradientFunction& fn, const ParamVector& x, double h = 1e-4,
                             double floor = 1e-3);

/// Numerically stable softplus on a scalar.
inline double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace fedmap::ad

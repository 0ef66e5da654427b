#pragma once

// Reverse-mode differentiation over rank-2 tensors.
//
// A Trace records primitive operations in construction order, so every
// node's inputs precede it. Gradients are themselves built out of the same
// primitives; on a depth-2 trace they stay in the trace and can be
// differentiated again. That is all the second-order machinery there is:
// input-space Hessian-vector quadratic forms are obtained by differentiating
// a gradient, never by forming a Hessian.
//
// Binary elementwise ops broadcast an operand whose extent is 1 along a
// dimension (scalars, 1xC rows, Rx1 columns).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "ebmlab/tensor.hpp"

namespace ebmlab::ad {

class Trace;

enum class Op : std::uint8_t {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kNeg,
  kScale,
  kMatMul,
  kTranspose,
  kExp,
  kLog,
  kTanh,
  kSigmoid,
  kSoftplus,
  kLeakyRelu,
  kSquare,
  kSqrt,
  kRecip,
  kSumAll,
  kReduceTo,
  kBroadcastTo,
  kLogSumExpRows,
  kReshape,
};

// Handle to a node of a Trace. Cheap to copy; only valid while the trace
// lives and has not been truncated below it.
struct Var {
  Trace* trace = nullptr;
  std::int32_t id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return trace != nullptr && id >= 0; }
};

class Trace {
 public:
  // order 1: gradients are values only. order 2: gradients may be kept as
  // traceable expressions (differentiable_grad).
  explicit Trace(int order = 1);

  Trace(const Trace&) = delete;
  Trace& operator=(const Trace&) = delete;

  int order() const { return order_; }
  std::size_t size() const { return nodes_.size(); }

  // Differentiable leaf (parameter or input).
  Var leaf(Tensor value);
  // Leaf whose gradient is never requested; backward passes skip it.
  Var constant(Tensor value);
  Var constant(double v) { return constant(Tensor::scalar(v)); }

  const Tensor& value(Var v) const;
  bool contains(Var v) const;

  // d output / d leaf for each leaf, as plain tensors. The backward nodes are
  // discarded afterwards, so the trace is left exactly as it was.
  std::vector<Tensor> grad_wrt(Var output, std::span<const Var> leaves);

  // Same gradients kept as nodes of this trace so they can be differentiated
  // again. Requires order 2.
  std::vector<Var> differentiable_grad(Var output, std::span<const Var> leaves);

  // Internal: used by the op functions.
  Var push(Op op, Tensor value, std::int32_t a = -1, std::int32_t b = -1, double param = 0.0);
  struct Node {
    Op op;
    std::int32_t a;
    std::int32_t b;
    double param;
    Tensor value;
  };
  const Node& node(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)]; }

 private:
  std::vector<Var> backward(Var output, std::span<const Var> leaves);
  void truncate(std::size_t n);

  int order_;
  std::vector<Node> nodes_;
};

// ---- primitives -----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var matmul(Var a, Var b);
Var transpose(Var a);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var leaky_relu(Var a, double slope);
inline Var relu(Var a) { return leaky_relu(a, 0.0); }
Var square(Var a);
Var sqrt(Var a);
Var recip(Var a);
Var sum(Var a);
// Sum over the dimensions where `target` has extent 1.
Var reduce_to(Var a, const Shape& target);
Var broadcast_to(Var a, const Shape& target);
// Row-wise log-sum-exp with max shift: RxC -> Rx1.
Var logsumexp_rows(Var a);
// Row-major reinterpretation with the same number of elements.
Var reshape(Var a, const Shape& target);

// ---- composites -----------------------------------------------------------

Var div(Var a, Var b);
Var mean(Var a);
Var sum_rows(Var a);  // RxC -> Rx1
Var add_scalar(Var a, double c);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }

// ---- scores and second-order forms ----------------------------------------

// Per-row energy function: maps an NxD input node to Nx1 energies.
using EnergyFn = std::function<Var(Trace&, Var)>;

// Score s(x) = grad_x log p(x) = -grad_x E(x), kept differentiable when the
// trace has order 2.
Var input_score(Trace& trace, Var energies, Var x);

// Per-row v^T (grad_x s(x)) v with s = -grad_x E, as an Nx1 node that stays
// differentiable with respect to every other leaf (parameters). For a
// single-row x the result is a scalar node.
Var input_hvp_form(Trace& trace, const EnergyFn& energy, Var x, const Tensor& v);

// ---- finite-difference checking --------------------------------------------

using ScalarFn = std::function<Var(Trace&, Var)>;

struct GradientCheck {
  std::vector<double> analytic;
  std::vector<double> numeric;
  std::vector<double> error;  // per coordinate, see check_gradient
  double max_error = 0.0;
};

// Compares the reverse-mode gradient of a scalar function with central
// differences. The per-coordinate error is |a_i - n_i| / max(|a|_inf, |n|_inf),
// falling back to the absolute difference when both gradients vanish.
// Throws NumericError tagged with the coordinate if an evaluation is not
// finite.
GradientCheck check_gradient(const ScalarFn& f, const Tensor& point, double step);

// Normwise relative error used by check_gradient and the tests.
double relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace ebmlab::ad

#include "ebmlab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ebmlab/error.hpp"

namespace ebmlab::ad {

namespace {

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ContractError(std::string(op) + ": expected rank-2 tensor, got " +
                        shape_string(t.shape()));
  }
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  Shape out(2);
  for (int d = 0; d < 2; ++d) {
    if (a[d] == b[d] || b[d] == 1) {
      out[d] = a[d];
    } else if (a[d] == 1) {
      out[d] = b[d];
    } else {
      throw ContractError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " +
                          shape_string(b));
    }
  }
  return out;
}

template <typename F>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f) {
  require_rank2(a, op);
  require_rank2(b, op);
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
  Tensor out(out_shape);
  const std::size_t rows = out_shape[0], cols = out_shape[1];
  const std::size_t ar = a.shape()[0] == 1 ? 0 : 1, ac = a.shape()[1] == 1 ? 0 : 1;
  const std::size_t br = b.shape()[0] == 1 ? 0 : 1, bc = b.shape()[1] == 1 ? 0 : 1;
  const std::size_t acols = a.shape()[1], bcols = b.shape()[1];
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* ra = pa + r * ar * acols;
    const double* rb = pb + r * br * bcols;
    double* ro = po + r * cols;
    for (std::size_t c = 0; c < cols; ++c) ro[c] = f(ra[c * ac], rb[c * bc]);
  }
  return out;
}

template <typename F>
Tensor unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  const auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

Tensor reduce_values(const Tensor& a, const Shape& target) {
  require_rank2(a, "reduce_to");
  if (target.size() != 2) throw ContractError("reduce_to: target must be rank 2");
  for (int d = 0; d < 2; ++d) {
    if (target[d] != a.shape()[d] && target[d] != 1) {
      throw ContractError("reduce_to: cannot reduce " + shape_string(a.shape()) + " to " +
                          shape_string(target));
    }
  }
  Tensor out(target);
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  const bool keep_r = target[0] != 1, keep_c = target[1] != 1;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out((keep_r ? r : 0), (keep_c ? c : 0)) += a(r, c);
    }
  }
  return out;
}

Tensor broadcast_values(const Tensor& a, const Shape& target) {
  require_rank2(a, "broadcast_to");
  if (target.size() != 2) throw ContractError("broadcast_to: target must be rank 2");
  for (int d = 0; d < 2; ++d) {
    if (a.shape()[d] != target[d] && a.shape()[d] != 1) {
      throw ContractError("broadcast_to: cannot broadcast " + shape_string(a.shape()) + " to " +
                          shape_string(target));
    }
  }
  Tensor out(target);
  const bool br = a.shape()[0] == 1, bc = a.shape()[1] == 1;
  for (std::size_t r = 0; r < target[0]; ++r) {
    for (std::size_t c = 0; c < target[1]; ++c) out(r, c) = a(br ? 0 : r, bc ? 0 : c);
  }
  return out;
}

Tensor matmul_values(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ContractError("matmul: inner extents differ: " + shape_string(a.shape()) + " x " +
                        shape_string(b.shape()));
  }
  Tensor out({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose_values(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a(i, j);
  return out;
}

double softplus_value(double x) {
  // log(1 + e^x) without overflow
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Trace& same_trace(Var a, Var b) {
  if (!a.valid() || !b.valid() || a.trace != b.trace) {
    throw ContractError("operands belong to different traces");
  }
  return *a.trace;
}

Trace& trace_of(Var a) {
  if (!a.valid()) throw ContractError("invalid variable handle");
  return *a.trace;
}

}  // namespace

const Tensor& Var::value() const { return trace->value(*this); }

Trace::Trace(int order) : order_(order) {
  if (order != 1 && order != 2) throw ContractError("trace order must be 1 or 2");
}

Var Trace::push(Op op, Tensor value, std::int32_t a, std::int32_t b, double param) {
  require_rank2(value, "trace");
  nodes_.push_back(Node{op, a, b, param, std::move(value)});
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Trace::leaf(Tensor value) { return push(Op::kLeaf, std::move(value)); }
Var Trace::constant(Tensor value) { return push(Op::kConstant, std::move(value)); }

bool Trace::contains(Var v) const {
  return v.trace == this && v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size();
}

const Tensor& Trace::value(Var v) const {
  if (!contains(v)) throw ContractError("variable does not belong to this trace");
  return nodes_[static_cast<std::size_t>(v.id)].value;
}

void Trace::truncate(std::size_t n) { nodes_.resize(n); }

std::vector<Var> Trace::backward(Var output, std::span<const Var> leaves) {
  if (!contains(output)) throw ContractError("output does not belong to this trace");
  if (value(output).size() != 1) {
    throw ContractError("gradient requested for non-scalar output of shape " +
                        shape_string(value(output).shape()));
  }
  for (const auto& l : leaves) {
    if (!contains(l)) throw Error("gradient requested for a leaf that is not in the trace");
  }

  const auto last = static_cast<std::size_t>(output.id);
  std::vector<char> needed(last + 1, 0);
  for (const auto& l : leaves) {
    if (static_cast<std::size_t>(l.id) <= last) needed[static_cast<std::size_t>(l.id)] = 1;
  }
  for (std::size_t i = 0; i <= last; ++i) {
    if (needed[i]) continue;
    const auto& n = nodes_[i];
    if (n.op == Op::kLeaf || n.op == Op::kConstant) continue;
    if ((n.a >= 0 && needed[static_cast<std::size_t>(n.a)]) ||
        (n.b >= 0 && needed[static_cast<std::size_t>(n.b)])) {
      needed[i] = 1;
    }
  }

  std::vector<std::int32_t> adjoint(last + 1, -1);
  if (needed[last]) adjoint[last] = constant(Tensor::scalar(1.0)).id;

  auto accumulate = [&](std::int32_t target, Var contribution) {
    if (target < 0 || !needed[static_cast<std::size_t>(target)]) return;
    auto& slot = adjoint[static_cast<std::size_t>(target)];
    slot = slot < 0 ? contribution.id : add(Var{this, slot}, contribution).id;
  };

  for (std::size_t i = last + 1; i-- > 0;) {
    if (!needed[i] || adjoint[i] < 0) continue;
    // Copy what we need: pushing nodes may reallocate nodes_.
    const Op op = nodes_[i].op;
    const std::int32_t ia = nodes_[i].a, ib = nodes_[i].b;
    const double param = nodes_[i].param;
    const Var g{this, adjoint[i]};
    const Var self{this, static_cast<std::int32_t>(i)};
    const Var va{this, ia}, vb{this, ib};
    auto wants = [&](std::int32_t id) { return id >= 0 && needed[static_cast<std::size_t>(id)]; };
    auto shape_of = [&](std::int32_t id) -> Shape {
      return nodes_[static_cast<std::size_t>(id)].value.shape();
    };

    switch (op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;
      case Op::kAdd:
        if (wants(ia)) accumulate(ia, reduce_to(g, shape_of(ia)));
        if (wants(ib)) accumulate(ib, reduce_to(g, shape_of(ib)));
        break;
      case Op::kSub:
        if (wants(ia)) accumulate(ia, reduce_to(g, shape_of(ia)));
        if (wants(ib)) accumulate(ib, reduce_to(neg(g), shape_of(ib)));
        break;
      case Op::kMul:
        if (wants(ia)) accumulate(ia, reduce_to(mul(g, vb), shape_of(ia)));
        if (wants(ib)) accumulate(ib, reduce_to(mul(g, va), shape_of(ib)));
        break;
      case Op::kNeg:
        accumulate(ia, neg(g));
        break;
      case Op::kScale:
        accumulate(ia, scale(g, param));
        break;
      case Op::kMatMul:
        if (wants(ia)) accumulate(ia, matmul(g, transpose(vb)));
        if (wants(ib)) accumulate(ib, matmul(transpose(va), g));
        break;
      case Op::kTranspose:
        accumulate(ia, transpose(g));
        break;
      case Op::kExp:
        accumulate(ia, mul(g, self));
        break;
      case Op::kLog:
        accumulate(ia, mul(g, recip(va)));
        break;
      case Op::kTanh:
        accumulate(ia, sub(g, mul(g, square(self))));
        break;
      case Op::kSigmoid:
        accumulate(ia, mul(g, sub(self, square(self))));
        break;
      case Op::kSoftplus:
        accumulate(ia, mul(g, sigmoid(va)));
        break;
      case Op::kLeakyRelu: {
        // The slope mask is piecewise constant, so it enters as a constant.
        Tensor mask = unary(nodes_[static_cast<std::size_t>(ia)].value,
                            [param](double x) { return x > 0 ? 1.0 : param; });
        accumulate(ia, mul(g, constant(std::move(mask))));
        break;
      }
      case Op::kSquare:
        accumulate(ia, scale(mul(g, va), 2.0));
        break;
      case Op::kSqrt:
        accumulate(ia, scale(mul(g, recip(self)), 0.5));
        break;
      case Op::kRecip:
        accumulate(ia, neg(mul(g, square(self))));
        break;
      case Op::kSumAll:
      case Op::kReduceTo:
        accumulate(ia, broadcast_to(g, shape_of(ia)));
        break;
      case Op::kBroadcastTo:
        accumulate(ia, reduce_to(g, shape_of(ia)));
        break;
      case Op::kLogSumExpRows:
        accumulate(ia, mul(g, exp(sub(va, self))));
        break;
      case Op::kReshape:
        accumulate(ia, reshape(g, shape_of(ia)));
        break;
    }
  }

  std::vector<Var> grads;
  grads.reserve(leaves.size());
  for (const auto& l : leaves) {
    const auto id = static_cast<std::size_t>(l.id);
    if (id <= last && adjoint[id] >= 0) {
      grads.push_back(Var{this, adjoint[id]});
    } else {
      grads.push_back(constant(Tensor::zeros_like(nodes_[id].value)));
    }
  }
  return grads;
}

std::vector<Tensor> Trace::grad_wrt(Var output, std::span<const Var> leaves) {
  const std::size_t mark = nodes_.size();
  auto vars = backward(output, leaves);
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (const auto& v : vars) out.push_back(nodes_[static_cast<std::size_t>(v.id)].value);
  truncate(mark);
  return out;
}

std::vector<Var> Trace::differentiable_grad(Var output, std::span<const Var> leaves) {
  if (order_ < 2) {
    throw UnsupportedOrderError("differentiable gradients need a trace of order 2");
  }
  return backward(output, leaves);
}

// ---- primitives -----------------------------------------------------------

Var add(Var a, Var b) {
  auto& t = same_trace(a, b);
  return t.push(Op::kAdd, binary(a.value(), b.value(), "add", std::plus<>{}), a.id, b.id);
}

Var sub(Var a, Var b) {
  auto& t = same_trace(a, b);
  return t.push(Op::kSub, binary(a.value(), b.value(), "sub", std::minus<>{}), a.id, b.id);
}

Var mul(Var a, Var b) {
  auto& t = same_trace(a, b);
  return t.push(Op::kMul, binary(a.value(), b.value(), "mul", std::multiplies<>{}), a.id, b.id);
}

Var neg(Var a) {
  auto& t = trace_of(a);
  return t.push(Op::kNeg, unary(a.value(), [](double x) { return -x; }), a.id);
}

Var scale(Var a, double c) {
  auto& t = trace_of(a);
  return t.push(Op::kScale, unary(a.value(), [c](double x) { return c * x; }), a.id, -1, c);
}

Var matmul(Var a, Var b) {
  auto& t = same_trace(a, b);
  return t.push(Op::kMatMul, matmul_values(a.value(), b.value()), a.id, b.id);
}

Var transpose(Var a) {
  auto& t = trace_of(a);
  return t.push(Op::kTranspose, transpose_values(a.value()), a.id);
}

Var exp(Var a) {
  auto& t = trace_of(a);
  return t.push(Op::kExp, unary(a.value(), [](double x) { return std::exp(x); }), a.id);
}

Var log(Var a) {
  auto& t = trace_of(a);
  return t.push(Op::kLog, unary(a.value(), [](double x) { return std::log(x); }), a.id);
}

Var tanh(Var a) {
  auto& t = trace_of(a);
  return t.push(Op::kTanh, unary(a.value(), [](double x) { return std::tanh(x); }), a.id);
}

Var sigmoid(Var a) {
  auto& t = trace_of(a);
  return t.push(Op::kSigmoid, unary(a.value(), sigmoid_value), a.id);
}

Var softplus(Var a) {
  auto& t = trace_of(a);
  return t.push(Op::kSoftplus, unary(a.value(), softplus_value), a.id);
}

Var leaky_relu(Var a, double slope) {
  auto& t = trace_of(a);
  return t.push(Op::kLeakyRelu,
                unary(a.value(), [slope](double x) { return x > 0 ? x : slope * x; }), a.id, -1,
                slope);
}

Var square(Var a) {
  auto& t = trace_of(a);
  return t.push(Op::kSquare, unary(a.value(), [](double x) { return x * x; }), a.id);
}

Var sqrt(Var a) {
  auto& t = trace_of(a);
  return t.push(Op::kSqrt, unary(a.value(), [](double x) { return std::sqrt(x); }), a.id);
}

Var recip(Var a) {
  auto& t = trace_of(a);
  return t.push(Op::kRecip, unary(a.value(), [](double x) { return 1.0 / x; }), a.id);
}

Var sum(Var a) {
  auto& t = trace_of(a);
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return t.push(Op::kSumAll, Tensor::scalar(s), a.id);
}

Var reduce_to(Var a, const Shape& target) {
  if (a.shape() == target) return a;
  auto& t = trace_of(a);
  return t.push(Op::kReduceTo, reduce_values(a.value(), target), a.id);
}

Var broadcast_to(Var a, const Shape& target) {
  if (a.shape() == target) return a;
  auto& t = trace_of(a);
  return t.push(Op::kBroadcastTo, broadcast_values(a.value(), target), a.id);
}

Var logsumexp_rows(Var a) {
  auto& t = trace_of(a);
  const Tensor& x = a.value();
  require_rank2(x, "logsumexp_rows");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  Tensor out({rows, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = x.row_span(r);
    const double m = *std::max_element(row.begin(), row.end());
    if (!std::isfinite(m)) {
      out(r, 0) = m;
      continue;
    }
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(row[c] - m);
    out(r, 0) = m + std::log(s);
  }
  return t.push(Op::kLogSumExpRows, std::move(out), a.id);
}

Var reshape(Var a, const Shape& target) {
  if (a.shape() == target) return a;
  auto& t = trace_of(a);
  if (shape_numel(target) != a.value().size()) {
    throw ContractError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(target));
  }
  return t.push(Op::kReshape, a.value().reshaped(target), a.id);
}

// ---- composites -----------------------------------------------------------

Var div(Var a, Var b) { return mul(a, recip(b)); }

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var sum_rows(Var a) { return reduce_to(a, Shape{a.shape()[0], 1}); }

Var add_scalar(Var a, double c) { return add(a, trace_of(a).constant(c)); }

// ---- scores and second-order forms ----------------------------------------

Var input_score(Trace& trace, Var energies, Var x) {
  const Var total = sum(energies);
  const Var leaves[] = {x};
  if (trace.order() >= 2) return neg(trace.differentiable_grad(total, leaves)[0]);
  auto g = trace.grad_wrt(total, leaves);
  for (auto& v : g[0].data()) v = -v;
  return trace.constant(std::move(g[0]));
}

Var input_hvp_form(Trace& trace, const EnergyFn& energy, Var x, const Tensor& v) {
  if (trace.order() < 2) {
    throw UnsupportedOrderError("input_hvp_form needs a trace of order 2");
  }
  if (v.shape() != x.shape()) {
    throw ContractError("projection " + shape_string(v.shape()) + " does not match input " +
                        shape_string(x.shape()));
  }
  const Var s = input_score(trace, energy(trace, x), x);
  const Var proj = trace.constant(v);
  // grad_x (s . v) = (grad_x s)^T v, row by row since rows are independent.
  const Var sv = sum(mul(s, proj));
  const Var leaves[] = {x};
  const Var jv = trace.differentiable_grad(sv, leaves)[0];
  return sum_rows(mul(jv, proj));
}

// ---- finite-difference checking --------------------------------------------

double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("relative_error: length mismatch");
  double diff = 0.0, scale_a = 0.0, scale_b = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale_a = std::max(scale_a, std::abs(a[i]));
    scale_b = std::max(scale_b, std::abs(b[i]));
  }
  const double s = std::max(scale_a, scale_b);
  return s > 0 ? diff / s : diff;
}

GradientCheck check_gradient(const ScalarFn& f, const Tensor& point, double step) {
  if (!(step > 0)) throw ContractError("check_gradient: step must be positive");

  auto evaluate = [&](const Tensor& at, std::ptrdiff_t coord) {
    Trace t(1);
    const Var out = f(t, t.leaf(at));
    const double v = out.value().item();
    if (!std::isfinite(v)) {
      throw NumericError("non-finite evaluation at coordinate " + std::to_string(coord), coord);
    }
    return v;
  };

  GradientCheck report;
  {
    Trace t(1);
    const Var x = t.leaf(point);
    const Var out = f(t, x);
    if (!std::isfinite(out.value().item())) throw NumericError("non-finite evaluation at the base point", -1);
    const Var leaves[] = {x};
    auto g = t.grad_wrt(out, leaves);
    report.analytic = g[0].values();
  }
  report.numeric.resize(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    Tensor plus = point, minus = point;
    plus[i] += step;
    minus[i] -= step;
    const auto coord = static_cast<std::ptrdiff_t>(i);
    report.numeric[i] = (evaluate(plus, coord) - evaluate(minus, coord)) / (2.0 * step);
  }
  double scale_a = 0.0, scale_n = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    if (!std::isfinite(report.analytic[i])) {
      throw NumericError("non-finite analytic gradient at coordinate " + std::to_string(i),
                         static_cast<std::ptrdiff_t>(i));
    }
    scale_a = std::max(scale_a, std::abs(report.analytic[i]));
    scale_n = std::max(scale_n, std::abs(report.numeric[i]));
  }
  const double s = std::max(scale_a, scale_n);
  report.error.resize(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double d = std::abs(report.analytic[i] - report.numeric[i]);
    report.error[i] = s > 0 ? d / s : d;
    report.max_error = std::max(report.max_error, report.error[i]);
  }
  return report;
}

}  // namespace ebmlab::ad

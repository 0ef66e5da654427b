#include <cmath>

#include "doctest.h"
#include "ebmlab/autodiff.hpp"
#include "ebmlab/error.hpp"
#include "ebmlab/model.hpp"
#include "ebmlab/rng.hpp"
#include "test_support.hpp"

using namespace ebmlab;
using ad::Trace;
using ad::Var;

namespace {

Var half_square_norm(Trace&, Var x) { return ad::scale(ad::sum_rows(ad::square(x)), 0.5); }

// Energy of a small net as a function of its flat parameters, evaluated on x.
double hvp_value(const models::ModelSpec& spec, const std::vector<double>& theta, const Tensor& x,
                 const Tensor& v) {
  models::ParameterSet p = models::zero_parameters(spec);
  p.values = theta;
  Trace t(2);
  auto params = models::bind(t, p, false);
  ad::EnergyFn e = [&](Trace& tr, Var in) { return models::energy(tr, spec, params, in); };
  return ad::sum(ad::input_hvp_form(t, e, t.leaf(x), v)).value().item();
}

}  // namespace

TEST_CASE("grad of half squared norm is x") {
  Trace t;
  Var x = t.leaf(Tensor::row({1.0, 2.0}));
  Var f = ad::sum(half_square_norm(t, x));
  const Var leaves[] = {x};
  auto g = t.grad_wrt(f, leaves);
  CHECK(g[0].values() == std::vector<double>{1.0, 2.0});
}

TEST_CASE("grad of a constant function is zero") {
  Trace t;
  Var x = t.leaf(Tensor::row({3.0, -1.0, 0.5}));
  Var c = t.constant(7.0);
  const Var leaves[] = {x};
  auto g = t.grad_wrt(c, leaves);
  CHECK(g[0].values() == std::vector<double>{0.0, 0.0, 0.0});
}

TEST_CASE("grad_wrt leaves the trace unchanged") {
  Trace t;
  Var x = t.leaf(Tensor::row({1.0, 2.0}));
  Var f = ad::sum(ad::exp(x));
  const auto before = t.size();
  const Var leaves[] = {x};
  (void)t.grad_wrt(f, leaves);
  CHECK(t.size() == before);
}

TEST_CASE("gradient error paths") {
  Trace t;
  Var x = t.leaf(Tensor::row({1.0, 2.0}));
  const Var leaves[] = {x};
  CHECK_THROWS_AS(t.grad_wrt(ad::square(x), leaves), ContractError);

  Trace other;
  Var y = other.leaf(Tensor::row({1.0}));
  const Var foreign[] = {y};
  CHECK_THROWS_AS(t.grad_wrt(ad::sum(x), foreign), Error);
  CHECK_THROWS_AS(t.differentiable_grad(ad::sum(x), leaves), UnsupportedOrderError);
}

TEST_CASE("random MLP gradients match central differences") {
  Rng rng(1234);
  for (int trial = 0; trial < 20; ++trial) {
    auto spec = testing::random_smooth_spec(rng);
    auto params = models::initialize(spec, rng());
    const Tensor x = normal_tensor(rng, 1, spec.input_dim);

    // input gradient
    auto wrt_input = ad::check_gradient(
        [&](Trace& t, Var in) {
          auto p = models::bind(t, params, false);
          return ad::sum(models::forward(t, spec, p, in));
        },
        x, 1e-4);
    CHECK(wrt_input.max_error < 1e-6);

    // parameter gradient
    Trace t;
    auto p = models::bind(t, params, true);
    Var out = ad::sum(models::forward(t, spec, p, t.constant(x)));
    auto analytic = models::flatten(t.grad_wrt(out, p));
    auto numeric = testing::central_difference(
        [&](const std::vector<double>& theta) {
          models::ParameterSet q = params;
          q.values = theta;
          return models::mlp_energy(spec, q, x).item();
        },
        params.values, 1e-4);
    CHECK(ad::relative_error(analytic, numeric) < 1e-6);
  }
}

TEST_CASE("input_hvp_form on the isotropic quadratic is -D") {
  Rng rng(7);
  for (std::size_t d : {1u, 3u, 8u}) {
    Trace t(2);
    Var x = t.leaf(normal_tensor(rng, 1, d));
    const Tensor v = rademacher_tensor(rng, 1, d);
    Var q = ad::input_hvp_form(t, half_square_norm, x, v);
    CHECK(q.value().item() == doctest::Approx(-static_cast<double>(d)).epsilon(1e-14));
  }
}

TEST_CASE("input_hvp_form of a quartic matches the analytic second derivative") {
  Trace t(2);
  Var x = t.leaf(Tensor::scalar(2.0));
  ad::EnergyFn quartic = [](Trace&, Var in) { return ad::scale(ad::square(ad::square(in)), 0.25); };
  Var q = ad::input_hvp_form(t, quartic, x, Tensor::scalar(1.0));
  CHECK(q.value().item() == doctest::Approx(-12.0).epsilon(1e-14));
}

TEST_CASE("input_hvp_form requires a depth-2 trace") {
  Trace t(1);
  Var x = t.leaf(Tensor::row({1.0, 2.0}));
  CHECK_THROWS_AS(ad::input_hvp_form(t, half_square_norm, x, Tensor::row({1.0, -1.0})),
                  UnsupportedOrderError);
}

TEST_CASE("input_hvp_form matches a finite difference of the input gradient") {
  Rng rng(99);
  for (int trial = 0; trial < 10; ++trial) {
    auto spec = testing::random_smooth_spec(rng);
    auto params = models::initialize(spec, rng());
    const Tensor x = normal_tensor(rng, 1, spec.input_dim);
    const Tensor v = rademacher_tensor(rng, 1, spec.input_dim);

    auto input_grad = [&](const Tensor& at) {
      Trace t;
      auto p = models::bind(t, params, false);
      Var in = t.leaf(at);
      const Var leaves[] = {in};
      return t.grad_wrt(ad::sum(models::forward(t, spec, p, in)), leaves)[0];
    };
    const double h = 1e-5;
    Tensor up = x, down = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      up[i] += h * v[i];
      down[i] -= h * v[i];
    }
    const Tensor gu = input_grad(up), gd = input_grad(down);
    double vhv = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) vhv += v[i] * (gu[i] - gd[i]) / (2 * h);

    const double form = hvp_value(spec, params.values, x, v);
    CHECK(std::abs(form - (-vhv)) / std::max(1.0, std::abs(vhv)) < 1e-4);
  }
}

TEST_CASE("input_hvp_form is even in v") {
  Rng rng(5);
  auto spec = testing::random_smooth_spec(rng);
  auto params = models::initialize(spec, 11);
  const Tensor x = normal_tensor(rng, 4, spec.input_dim);
  Tensor v = rademacher_tensor(rng, 4, spec.input_dim);
  Tensor minus_v = v;
  for (auto& e : minus_v.data()) e = -e;
  CHECK(hvp_value(spec, params.values, x, v) == hvp_value(spec, params.values, x, minus_v));
}

TEST_CASE("parameter gradient of input_hvp_form matches finite differences") {
  models::ModelSpec spec;
  spec.input_dim = 2;
  spec.hidden = {3};
  spec.activation = models::Activation::kTanh;
  auto params = models::initialize(spec, 3);
  REQUIRE(params.size() <= 16);
  Rng rng(17);
  const Tensor x = normal_tensor(rng, 3, 2);
  const Tensor v = rademacher_tensor(rng, 3, 2);

  Trace t(2);
  auto p = models::bind(t, params, true);
  ad::EnergyFn e = [&](Trace& tr, Var in) { return models::energy(tr, spec, p, in); };
  Var form = ad::sum(ad::input_hvp_form(t, e, t.leaf(x), v));
  auto analytic = models::flatten(t.grad_wrt(form, p));
  auto numeric = testing::central_difference(
      [&](const std::vector<double>& theta) { return hvp_value(spec, theta, x, v); }, params.values,
      1e-5);
  CHECK(ad::relative_error(analytic, numeric) < 1e-4);
}

TEST_CASE("gradient is linear in the function") {
  Rng rng(21);
  const Tensor x0 = normal_tensor(rng, 2, 3);
  auto grad_of = [&](const std::function<Var(Trace&, Var)>& f) {
    Trace t;
    Var x = t.leaf(x0);
    const Var leaves[] = {x};
    return t.grad_wrt(ad::sum(f(t, x)), leaves)[0];
  };
  auto f = [](Trace&, Var x) { return ad::tanh(ad::mul(x, x)); };
  auto g = [](Trace&, Var x) { return ad::softplus(ad::scale(x, 3.0)); };
  const double a = 0.75, b = -2.5;
  auto combined = grad_of([&](Trace& t, Var x) {
    return ad::add(ad::scale(f(t, x), a), ad::scale(g(t, x), b));
  });
  auto gf = grad_of(f), gg = grad_of(g);
  for (std::size_t i = 0; i < x0.size(); ++i) {
    CHECK(combined[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-14));
  }
}

TEST_CASE("identical traces produce bit-identical gradients") {
  auto spec = models::ModelSpec{};
  spec.input_dim = 3;
  spec.hidden = {8, 8};
  spec.activation = models::Activation::kSwish;
  auto params = models::initialize(spec, 42);
  Rng rng(1);
  const Tensor x = normal_tensor(rng, 5, 3);
  auto run = [&] {
    Trace t(2);
    auto p = models::bind(t, params, true);
    ad::EnergyFn e = [&](Trace& tr, Var in) { return models::energy(tr, spec, p, in); };
    Var form = ad::sum(ad::input_hvp_form(t, e, t.leaf(x), Tensor({5, 3}, 1.0)));
    return models::flatten(t.grad_wrt(form, p));
  };
  CHECK(run() == run());
}

TEST_CASE("every primitive has first and second derivatives matching finite differences") {
  using Fn = std::function<Var(Trace&, Var)>;
  Rng rng(8);
  // Positive inputs so log / sqrt / recip are defined.
  const Tensor x = uniform_tensor(rng, 3, 4, 0.5, 2.0);
  const Tensor w = normal_tensor(rng, 4, 2);
  const std::vector<std::pair<const char*, Fn>> cases = {
      {"add", [](Trace& t, Var a) { return ad::add(a, t.constant(Tensor::row({1, 2, 3, 4}))); }},
      {"sub", [](Trace&, Var a) { return ad::sub(ad::square(a), ad::reduce_to(a, {3, 1})); }},
      {"mul", [](Trace&, Var a) { return ad::mul(a, ad::reduce_to(a, {1, 4})); }},
      {"neg", [](Trace&, Var a) { return ad::neg(ad::square(a)); }},
      {"scale", [](Trace&, Var a) { return ad::scale(ad::square(a), 1.7); }},
      {"matmul", [&](Trace& t, Var a) { return ad::square(ad::matmul(a, t.constant(w))); }},
      {"transpose", [](Trace&, Var a) { return ad::square(ad::transpose(a)); }},
      {"exp", [](Trace&, Var a) { return ad::exp(a); }},
      {"log", [](Trace&, Var a) { return ad::mul(a, ad::log(a)); }},
      {"tanh", [](Trace&, Var a) { return ad::tanh(a); }},
      {"sigmoid", [](Trace&, Var a) { return ad::sigmoid(ad::scale(a, -1.3)); }},
      {"softplus", [](Trace&, Var a) { return ad::softplus(ad::square(a)); }},
      {"leaky_relu", [](Trace&, Var a) { return ad::square(ad::leaky_relu(ad::add_scalar(a, -1.2), 0.2)); }},
      {"square", [](Trace&, Var a) { return ad::square(ad::square(a)); }},
      {"sqrt", [](Trace&, Var a) { return ad::sqrt(a); }},
      {"recip", [](Trace&, Var a) { return ad::recip(a); }},
      {"sum", [](Trace&, Var a) { return ad::square(ad::sum(ad::square(a))); }},
      {"reduce_to", [](Trace&, Var a) { return ad::square(ad::reduce_to(ad::square(a), {1, 4})); }},
      {"broadcast_to", [](Trace&, Var a) { return ad::mul(a, ad::broadcast_to(ad::sum(a), {3, 4})); }},
      {"reshape", [](Trace&, Var a) { return ad::logsumexp_rows(ad::reshape(ad::square(a), {6, 2})); }},
      {"logsumexp_rows", [](Trace&, Var a) { return ad::square(ad::logsumexp_rows(ad::square(a))); }},
  };
  for (const auto& [name, fn] : cases) {
    CAPTURE(name);
    auto first = ad::check_gradient([&](Trace& t, Var a) { return ad::sum(fn(t, a)); }, x, 1e-5);
    CHECK(first.max_error < 1e-7);

    // Second order: differentiate the (differentiable) gradient contracted
    // with a fixed direction, compare with central differences of it.
    const Tensor dir = normal_tensor(rng, 3, 4);
    auto directional = [&](Trace& t, Var a) {
      const Var leaves[] = {a};
      Var g = t.differentiable_grad(ad::sum(fn(t, a)), leaves)[0];
      return ad::sum(ad::mul(g, t.constant(dir)));
    };
    Trace t(2);
    Var a = t.leaf(x);
    const Var leaves[] = {a};
    auto analytic = t.grad_wrt(directional(t, a), leaves)[0];
    auto numeric = testing::central_difference(
        [&](const std::vector<double>& v) {
          Trace tt(2);
          return directional(tt, tt.leaf(Tensor(x.shape(), v))).value().item();
        },
        x.values(), 1e-5);
    CHECK(ad::relative_error(analytic.values(), numeric) < 1e-6);
  }
}

TEST_CASE("logsumexp does not overflow") {
  Trace t;
  Var x = t.leaf(Tensor::matrix(1, 3, {1000.0, 1000.0, -1000.0}));
  Var l = ad::logsumexp_rows(x);
  CHECK(l.value().item() == doctest::Approx(1000.0 + std::log(2.0)));
  const Var leaves[] = {x};
  auto g = t.grad_wrt(ad::sum(l), leaves)[0];
  CHECK(g[0] == doctest::Approx(0.5));
  CHECK(g[2] == doctest::Approx(0.0));
}

TEST_CASE("check_gradient on simple functions") {
  auto linear = ad::check_gradient(
      [](Trace& t, Var x) { return ad::sum(ad::mul(x, t.constant(Tensor::row({2.0, -3.0, 0.5})))); },
      Tensor::row({0.3, 0.1, -4.0}), 1e-4);
  CHECK(linear.max_error < 1e-10);

  auto e = ad::check_gradient([](Trace&, Var x) { return ad::sum(ad::exp(x)); }, Tensor::scalar(0.0), 1e-4);
  CHECK(e.analytic[0] == 1.0);
  CHECK(std::abs(e.numeric[0] - 1.0) < 1e-7);
}

TEST_CASE("check_gradient reports the coordinate of a non-finite evaluation") {
  // log(x) is NaN once the second coordinate is pushed below zero.
  try {
    ad::check_gradient([](Trace&, Var x) { return ad::sum(ad::log(x)); }, Tensor::row({1.0, 5e-5}), 1e-4);
    FAIL("expected NumericError");
  } catch (const NumericError& err) {
    CHECK(err.coordinate() == 1);
  }
}

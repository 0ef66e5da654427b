#include <algorithm>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "ebmlab/error.hpp"
#include "ebmlab/objectives.hpp"
#include "test_support.hpp"

using namespace ebmlab;
using ad::Trace;
using ad::Var;
namespace obj = ebmlab::objectives;

namespace {

Var half_square_norm(Trace&, Var x) { return ad::scale(ad::sum_rows(ad::square(x)), 0.5); }

double ssm_value(const ad::EnergyFn& e, const Tensor& x, const Tensor& v) {
  Trace t(2);
  return obj::ssm_vr_loss(t, e, x, v).value().item();
}

// Energy-head model with the given flat parameters, bound as constants.
ad::EnergyFn constant_energy(const models::ModelSpec& spec, const std::vector<double>& theta) {
  models::ParameterSet p = models::zero_parameters(spec);
  p.values = theta;
  return models::Model{spec, p}.energy_fn();
}


}  // namespace

TEST_CASE("ssm of the standard quadratic at the origin is -D") {
  Rng rng(1);
  for (std::size_t d : {1, 2, 5}) {
    Trace t(2);
    CHECK(obj::ssm_vr_loss(t, half_square_norm, Tensor({1, d}), rng).value().item() ==
          doctest::Approx(-static_cast<double>(d)));
  }
}

TEST_CASE("ssm of the standard quadratic is -D + |x|^2 / 2") {
  const Tensor x = Tensor::row({1.0, -1.0});
  const Tensor v = Tensor::row({1.0, 1.0});
  CHECK(ssm_value(half_square_norm, x, v) == doctest::Approx(-1.0).epsilon(1e-12));

  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 1 + rng() % 6;
    const Tensor xr = normal_tensor(rng, 1, d, 2.0);
    const Tensor vr = rademacher_tensor(rng, 1, d);
    double norm2 = 0.0;
    for (double a : xr.values()) norm2 += a * a;
    CHECK(std::abs(ssm_value(half_square_norm, xr, vr) - (-static_cast<double>(d) + 0.5 * norm2)) <
          1e-8);
  }
}

TEST_CASE("ssm matches a hyper-dual second-order oracle on random nets") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto spec = testing::random_smooth_spec(rng);
    const auto params = models::initialize(spec, rng());
    const Tensor x = normal_tensor(rng, 4, spec.input_dim);
    const Tensor v = rademacher_tensor(rng, 4, spec.input_dim);
    const double got = ssm_value(constant_energy(spec, params.values), x, v);
    const double want = testing::ssm_oracle(spec, params.values, x, v);
    CHECK(std::abs(got - want) <= 1e-8 * std::max(1.0, std::abs(want)));
  }
}

TEST_CASE("ssm parameter gradient matches finite differences") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    models::ModelSpec spec;
    spec.input_dim = 1 + trial % 2;
    spec.hidden = {3};
    spec.activation = trial % 2 ? models::Activation::kSwish : models::Activation::kTanh;
    REQUIRE(models::parameter_layout(spec).back().offset + 1 <= 16);
    const auto params = models::initialize(spec, rng());
    const Tensor x = normal_tensor(rng, 3, spec.input_dim);
    const Tensor v = rademacher_tensor(rng, 3, spec.input_dim);

    Trace t(2);
    const auto leaves = models::bind(t, params, true);
    ad::EnergyFn e = [&](Trace& tr, Var in) { return models::energy(tr, spec, leaves, in); };
    const Var loss = obj::ssm_vr_loss(t, e, x, v);
    const auto analytic = models::flatten(t.grad_wrt(loss, leaves));

    const auto numeric = testing::central_difference(
        [&](const std::vector<double>& th) { return testing::ssm_oracle(spec, th, x, v); }, params.values,
        1e-5);
    CHECK(ad::relative_error(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("ssm needs an order-2 trace and matching projections") {
  Trace t1(1);
  CHECK_THROWS_AS(obj::ssm_vr_loss(t1, half_square_norm, Tensor({2, 2}), Tensor({2, 2})),
                  UnsupportedOrderError);
  Trace t2(2);
  CHECK_THROWS_AS(obj::ssm_vr_loss(t2, half_square_norm, Tensor({2, 2}), Tensor({2, 3})),
                  ContractError);
}

TEST_CASE("rademacher projections reproduce the squared norm on average") {
  Rng rng(5);
  const std::vector<double> s = {0.3, -1.2, 2.0, 0.7};
  double norm2 = 0.0;
  for (double a : s) norm2 += a * a;
  const int draws = 100000;
  double acc = 0.0;
  for (int i = 0; i < draws; ++i) {
    const Tensor v = rademacher_tensor(rng, 1, s.size());
    double p = 0.0;
    for (std::size_t j = 0; j < s.size(); ++j) p += v.values()[j] * s[j];
    acc += p * p;
  }
  CHECK(std::abs(acc / draws - norm2) / norm2 < 0.02);
}

TEST_CASE("cd loss arithmetic") {
  ad::EnergyFn identity = [](Trace&, Var x) { return x; };
  Trace t;
  const Tensor a({3, 1}, std::vector<double>{0.5, 1.0, -2.0});
  CHECK(obj::cd_loss(t, identity, a, a).value().item() == 0.0);
  const Tensor data({2, 1}, std::vector<double>{1.0, 3.0});
  const Tensor samples({2, 1}, std::vector<double>{2.0, 2.0});
  CHECK(obj::cd_loss(t, identity, data, samples).value().item() == 0.0);
  CHECK_THROWS_AS(obj::cd_loss(t, half_square_norm, Tensor({2, 2}), Tensor({2, 3})), ContractError);
}

TEST_CASE("cd gradient vanishes at the maximum-likelihood parameter") {
  // E(x) = theta x^2 has variance 1 / (2 theta); data variance 0.5 => theta = 1.
  Rng rng(6);
  const std::size_t n = 100000;
  const Tensor data = normal_tensor(rng, n, 1, std::sqrt(0.5));
  const Tensor samples = normal_tensor(rng, n, 1, std::sqrt(1.0 / 2.0));
  Trace t;
  const Var theta = t.leaf(Tensor::scalar(1.0));
  ad::EnergyFn e = [&](Trace&, Var x) { return ad::mul(theta, ad::square(x)); };
  const Var loss = obj::cd_loss(t, e, data, samples);
  const Var leaves[] = {theta};
  CHECK(std::abs(t.grad_wrt(loss, leaves)[0].item()) < 0.05);
}

TEST_CASE("cd gradient ignores a constant energy offset") {
  Rng rng(7);
  models::ModelSpec spec;
  spec.input_dim = 2;
  spec.hidden = {4};
  spec.activation = models::Activation::kTanh;
  const auto params = models::initialize(spec, 9);
  const Tensor data = normal_tensor(rng, 5, 2);
  const Tensor samples = normal_tensor(rng, 7, 2);
  auto grad = [&](double offset) {
    Trace t;
    const auto leaves = models::bind(t, params, true);
    ad::EnergyFn e = [&](Trace& tr, Var x) {
      return ad::add_scalar(models::energy(tr, spec, leaves, x), offset);
    };
    return models::flatten(t.grad_wrt(obj::cd_loss(t, e, data, samples), leaves));
  };
  CHECK(ad::relative_error(grad(0.0), grad(123.0)) < 1e-12);
}

TEST_CASE("cd parameter gradient matches finite differences") {
  Rng rng(8);
  models::ModelSpec spec;
  spec.input_dim = 2;
  spec.hidden = {3};
  spec.activation = models::Activation::kSoftplus;
  const auto params = models::initialize(spec, 10);
  const Tensor data = normal_tensor(rng, 6, 2);
  const Tensor samples = normal_tensor(rng, 4, 2);
  Trace t;
  const auto leaves = models::bind(t, params, true);
  ad::EnergyFn e = [&](Trace& tr, Var x) { return models::energy(tr, spec, leaves, x); };
  const auto analytic = models::flatten(t.grad_wrt(obj::cd_loss(t, e, data, samples), leaves));
  auto mean_energy = [&](const std::vector<double>& th, const Tensor& x) {
    double s = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) s += testing::straight_line_mlp(spec, th, x.row_vector(r))[0];
    return s / static_cast<double>(x.rows());
  };
  const auto numeric = testing::central_difference(
      [&](const std::vector<double>& th) { return mean_energy(th, data) - mean_energy(th, samples); },
      params.values, 1e-6);
  CHECK(ad::relative_error(analytic, numeric) < 1e-4);
}

namespace {

models::ModelSpec flow_spec(std::size_t d, std::size_t layers) {
  models::ModelSpec s;
  s.input_dim = d;
  s.head = models::HeadKind::kFlow;
  s.flow_layers = layers;
  return s;
}

models::ParameterSet identity_flow(const models::ModelSpec& spec) {
  // beta = softplus(beta_raw) - softplus(alpha_raw) = 0
  return models::zero_parameters(spec);
}

}  // namespace

TEST_CASE("flow nll of the identity flow") {
  const auto spec = flow_spec(2, 2);
  const auto params = identity_flow(spec);
  Trace t;
  const auto leaves = models::bind(t, params, false);
  CHECK(obj::flow_nll(t, spec, leaves, Tensor({1, 2})).value().item() ==
        doctest::Approx(std::log(2.0 * std::numbers::pi)).epsilon(1e-12));

  const Tensor x({2, 2}, std::vector<double>{1.0, 2.0, -0.5, 0.0});
  const double want = 0.5 * ((5.0 + 0.25) / 2.0) * 2.0 / 2.0 + std::log(2.0 * std::numbers::pi);
  CHECK(obj::flow_nll(t, spec, leaves, x).value().item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("trained 1-d flow reaches the entropy of its data") {
  Rng rng(11);
  const Tensor train = [&] {
    Tensor x = normal_tensor(rng, 2000, 1);
    for (auto& v : x.values()) v += 3.0;
    return x;
  }();
  const Tensor test = [&] {
    Tensor x = normal_tensor(rng, 5000, 1);
    for (auto& v : x.values()) v += 3.0;
    return x;
  }();
  const auto spec = flow_spec(1, 8);
  auto params = models::initialize(spec, 12);
  Adam adam(params.size());
  Rng batch_rng(13);
  for (int step = 0; step < 3000; ++step) {
    std::vector<std::size_t> idx(128);
    for (auto& i : idx) i = batch_rng() % train.rows();
    const Tensor batch = train.take_rows(idx);
    Trace t;
    const auto leaves = models::bind(t, params, true);
    const auto grad = models::flatten(t.grad_wrt(obj::flow_nll(t, spec, leaves, batch), leaves));
    adam.step(params.values, grad, 1e-2);
  }
  Trace t;
  const auto leaves = models::bind(t, params, false);
  const double nll = obj::flow_nll(t, spec, leaves, test).value().item();
  const double entropy = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
  CHECK(std::abs(nll - entropy) < 0.1);
}

TEST_CASE("cross entropy closed forms") {
  const int zero_labels[] = {0};
  CHECK(obj::ce_loss(Tensor({1, 3}), zero_labels) == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(obj::ce_loss(Tensor::row({10.0, 0.0}), zero_labels) ==
        doctest::Approx(std::log1p(std::exp(-10.0))).epsilon(1e-9));
  CHECK(obj::ce_loss(Tensor::row({1000.0, 0.0}), zero_labels) < 1e-300);

  const int bad[] = {2};
  CHECK_THROWS_AS(obj::ce_loss(Tensor({1, 2}), bad), ContractError);
  const int negative[] = {-1};
  CHECK_THROWS_AS(obj::ce_loss(Tensor({1, 2}), negative), ContractError);
  const int two[] = {0, 1};
  CHECK_THROWS_AS(obj::ce_loss(Tensor({1, 2}), two), ContractError);
}

TEST_CASE("cross entropy gradient matches finite differences") {
  Rng rng(14);
  const Tensor logits = normal_tensor(rng, 4, 3);
  const std::vector<int> labels = {0, 2, 1, 2};
  auto f = [&](Trace& t, Var l) { return obj::ce_loss(t, l, labels); };
  CHECK(ad::check_gradient(f, logits, 1e-6).max_error < 1e-7);
}

TEST_CASE("jem loss combination") {
  Trace t;
  const Var base = t.constant(5.0);
  const Var ce = t.constant(1.0986);
  const Var zero = obj::jem_loss(base, ce, {0.0, obj::BaseObjective::kCd});
  CHECK(zero.id == base.id);
  CHECK(obj::jem_loss(base, ce, {2.0, obj::BaseObjective::kCd}).value().item() ==
        doctest::Approx(7.1972).epsilon(1e-12));
  CHECK_THROWS_AS(obj::jem_loss(base, ce, {-1.0, obj::BaseObjective::kCd}), ContractError);

  // affine in gamma
  const double l1 = obj::jem_loss(base, ce, {1.0, obj::BaseObjective::kSsm}).value().item();
  const double l3 = obj::jem_loss(base, ce, {3.0, obj::BaseObjective::kSsm}).value().item();
  const double l2 = obj::jem_loss(base, ce, {2.0, obj::BaseObjective::kSsm}).value().item();
  CHECK(l2 == doctest::Approx(0.5 * (l1 + l3)).epsilon(1e-14));
}

TEST_CASE("eta is clamped into its range") {
  obj::VeraConfig cfg;
  obj::VeraState state(cfg);
  CHECK(state.eta() == 0.1);
  state.propose_eta(0.5, cfg);
  CHECK(state.eta() == 0.3);
  state.propose_eta(0.001, cfg);
  CHECK(state.eta() == 0.01);
  for (int i = 0; i < 200; ++i) {
    state.update_eta(i % 3 ? 1e6 : -1e6, 0.5, cfg);
    CHECK(state.eta() >= 0.01);
    CHECK(state.eta() <= 0.3);
  }
}

TEST_CASE("generator layout") {
  const auto spec = obj::generator_spec(16, 2);
  CHECK(spec.hidden == std::vector<std::size_t>{100, 100, 100, 100, 100});
  CHECK(spec.activation == models::Activation::kLeakyRelu);
  CHECK(spec.leaky_slope == 0.2);
  CHECK(spec.output_width() == 2);
}

TEST_CASE("vera without entropy term gives the cd gradient on generator samples") {
  Rng rng(15);
  models::ModelSpec ebm_spec;
  ebm_spec.input_dim = 2;
  ebm_spec.hidden = {8, 8};
  const models::Model ebm{ebm_spec, models::initialize(ebm_spec, 16)};
  const auto gspec = obj::generator_spec(4, 2, {8, 8});
  const models::Model gen{gspec, models::initialize(gspec, 17)};
  obj::VeraConfig cfg;
  cfg.entropy_weight = 0.0;
  cfg.latent_dim = 4;
  obj::VeraState state(cfg);
  const Tensor batch = normal_tensor(rng, 16, 2);
  const auto step = obj::vera_step(ebm, gen, batch, cfg, state, rng);

  Trace t;
  const auto leaves = models::bind(t, ebm.params, true);
  ad::EnergyFn e = [&](Trace& tr, Var x) { return models::energy(tr, ebm_spec, leaves, x); };
  const Var loss = obj::cd_loss(t, e, batch, step.samples);
  CHECK(models::flatten(t.grad_wrt(loss, leaves)) == step.ebm_grad);
  CHECK(loss.value().item() == step.ebm_loss);
  CHECK(step.generator_grad.size() == gen.params.size());
  CHECK(step.eta >= cfg.eta_min);
  CHECK(step.eta <= cfg.eta_max);
}

TEST_CASE("vera entropy gradient points along the exact gaussian entropy gradient") {
  // Linear generator g(z) = z W: x ~ N(0, W^T W + sx^2 I), entropy
  // 0.5 ln det(2 pi e Sigma), d/dW = W Sigma^{-1}. Default sigma_x and K;
  // eta is first fitted by its own ascent with W held fixed. The per-point
  // estimate carries noise of order 1 / (sigma_x sqrt(K)), hence the large
  // evaluation batch.
  const std::size_t l = 2, d = 2;
  const auto gspec = obj::generator_spec(l, d, {});
  models::ModelSpec ebm_spec;
  ebm_spec.input_dim = d;
  ebm_spec.hidden = {2};
  const models::Model ebm{ebm_spec, models::zero_parameters(ebm_spec)};

  obj::VeraConfig cfg;
  cfg.entropy_weight = 1.0;
  cfg.latent_dim = l;
  cfg.eta_lr = 5e-3;
  Rng rng(18);
  int positive = 0;
  const int trials = 100;
  for (int trial = 0; trial < trials; ++trial) {
    models::Model gen{gspec, models::zero_parameters(gspec)};
    const Tensor w = normal_tensor(rng, l, d);
    std::copy(w.values().begin(), w.values().end(), gen.params.values.begin());
    obj::VeraState state(cfg);
    for (int warm = 0; warm < 100; ++warm) obj::vera_step(ebm, gen, Tensor({64, d}), cfg, state, rng);
    const auto step = obj::vera_step(ebm, gen, Tensor({16384, d}), cfg, state, rng);

    const double s2 = cfg.sigma_x * cfg.sigma_x;
    const double s00 = w(0, 0) * w(0, 0) + w(1, 0) * w(1, 0) + s2;
    const double s11 = w(0, 1) * w(0, 1) + w(1, 1) * w(1, 1) + s2;
    const double s01 = w(0, 0) * w(0, 1) + w(1, 0) * w(1, 1);
    const double det = s00 * s11 - s01 * s01;
    const double inv[2][2] = {{s11 / det, -s01 / det}, {-s01 / det, s00 / det}};
    double dot = 0.0, na = 0.0, ne = 0.0;
    for (std::size_t i = 0; i < l; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        const double exact = w(i, 0) * inv[0][j] + w(i, 1) * inv[1][j];
        const double estimate = -step.generator_grad[i * d + j];
        dot += exact * estimate;
        na += exact * exact;
        ne += estimate * estimate;
      }
    }
    if (dot / std::sqrt(na * ne) > 0.0) ++positive;
  }
  MESSAGE("positive cosine in " << positive << " of " << trials);
  CHECK(positive >= 90);
}

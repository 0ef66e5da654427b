#include "ebmlab/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "ebmlab/error.hpp"

namespace ebmlab::objectives {

using ad::Var;

ad::Var ssm_vr_loss(ad::Trace& trace, const ad::EnergyFn& energy, const Tensor& x, Rng& rng) {
  return ssm_vr_loss(trace, energy, x, rademacher_tensor(rng, x.rows(), x.cols()));
}

ad::Var ssm_vr_loss(ad::Trace& trace, const ad::EnergyFn& energy, const Tensor& x,
                    const Tensor& projections) {
  if (trace.order() < 2) {
    throw UnsupportedOrderError("ssm_vr_loss needs a trace of order 2");
  }
  if (projections.shape() != x.shape()) {
    throw ContractError("ssm_vr_loss: projections " + shape_string(projections.shape()) +
                        " do not match batch " + shape_string(x.shape()));
  }
  const Var xv = trace.leaf(x);
  const Var s = ad::input_score(trace, energy(trace, xv), xv);
  const Var v = trace.constant(projections);
  const Var leaves[] = {xv};
  const Var jv = trace.differentiable_grad(ad::sum(ad::mul(s, v)), leaves)[0];
  const Var form = ad::sum_rows(ad::mul(jv, v));
  const Var half_norm = ad::scale(ad::sum_rows(ad::square(s)), 0.5);
  return ad::mean(ad::add(form, half_norm));
}

ad::Var cd_loss(ad::Trace& trace, const ad::EnergyFn& energy, const Tensor& data,
                const Tensor& samples) {
  if (data.rank() != 2 || samples.rank() != 2 || data.cols() != samples.cols()) {
    throw ContractError("cd_loss: data " + shape_string(data.shape()) + " and samples " +
                        shape_string(samples.shape()) + " differ in feature dimension");
  }
  const Var e_data = energy(trace, trace.constant(data));
  const Var e_samples = energy(trace, trace.constant(samples));
  return ad::sub(ad::mean(e_data), ad::mean(e_samples));
}

ad::Var flow_nll(ad::Trace& trace, const models::ModelSpec& spec,
                 std::span<const ad::Var> params, const Tensor& x) {
  return ad::neg(ad::mean(models::flow_logdensity(trace, spec, params, trace.constant(x))));
}

namespace {

Tensor one_hot(std::span<const int> labels, std::size_t rows, std::size_t classes) {
  if (labels.size() != rows) {
    throw ContractError("ce_loss: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(rows) + " rows");
  }
  Tensor mask({rows, classes});
  for (std::size_t i = 0; i < rows; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw ContractError("ce_loss: label " + std::to_string(y) + " at row " + std::to_string(i) +
                          " outside [0, " + std::to_string(classes) + ")");
    }
    mask(i, static_cast<std::size_t>(y)) = 1.0;
  }
  return mask;
}

}  // namespace

ad::Var ce_loss(ad::Trace& trace, ad::Var logits, std::span<const int> labels) {
  const auto& shape = logits.shape();
  const Var mask = trace.constant(one_hot(labels, shape[0], shape[1]));
  const Var picked = ad::sum_rows(ad::mul(logits, mask));
  return ad::mean(ad::sub(ad::logsumexp_rows(logits), picked));
}

double ce_loss(const Tensor& logits, std::span<const int> labels) {
  ad::Trace trace(1);
  return ce_loss(trace, trace.constant(logits), labels).value().item();
}

ad::Var jem_loss(ad::Var base, ad::Var ce, const JemConfig& config) {
  if (!(config.gamma >= 0.0)) throw ContractError("jem_loss: gamma must be >= 0");
  if (config.gamma == 0.0) return base;
  return ad::add(base, ad::scale(ce, config.gamma));
}

// ---- VERA --------------------------------------------------------------------

models::ModelSpec generator_spec(std::size_t latent_dim, std::size_t output_dim,
                                 std::vector<std::size_t> hidden) {
  models::ModelSpec spec;
  spec.input_dim = latent_dim;
  spec.hidden = std::move(hidden);
  spec.activation = models::Activation::kLeakyRelu;
  spec.leaky_slope = 0.2;
  spec.head = models::HeadKind::kOutput;
  spec.output_dim = output_dim;
  spec.validate();
  return spec;
}

double clamp_eta(double eta, const VeraConfig& config) {
  if (std::isnan(eta)) return config.eta_init;
  return std::clamp(eta, config.eta_min, config.eta_max);
}

VeraState::VeraState(const VeraConfig& config)
    : eta_(clamp_eta(config.eta_init, config)),
      optimizer_(1, AdamSettings{config.generator_beta1, config.generator_beta2, 1e-8, 0.0}) {}

void VeraState::update_eta(double gradient, double lr, const VeraConfig& config) {
  if (!std::isfinite(gradient)) return;
  double p[] = {eta_};
  const double g[] = {gradient};
  optimizer_.ascend(p, g, lr);
  eta_ = clamp_eta(p[0], config);
}

void VeraState::propose_eta(double eta, const VeraConfig& config) { eta_ = clamp_eta(eta, config); }

namespace {

void check_vera_config(const VeraConfig& c) {
  if (!(c.entropy_weight >= 0.0)) throw ConfigError("vera: entropy_weight must be >= 0");
  if (!(c.sigma_x > 0.0)) throw ConfigError("vera: sigma_x must be > 0");
  if (c.posterior_samples < 1) throw ConfigError("vera: posterior_samples must be >= 1");
  if (!(c.eta_min > 0.0 && c.eta_min <= c.eta_max)) throw ConfigError("vera: bad eta range");
}

}  // namespace

PosteriorScore posterior_score(const models::Model& generator, const Tensor& z, const Tensor& x,
                               double eta, const VeraConfig& config, Rng& rng) {
  check_vera_config(config);
  const std::size_t b = z.rows();
  const std::size_t l = z.cols();
  const std::size_t d = x.cols();
  const std::size_t k = config.posterior_samples;
  if (x.rows() != b || l != generator.spec.input_dim || d != generator.spec.output_width()) {
    throw ContractError("posterior_score: shapes z " + shape_string(z.shape()) + ", x " +
                        shape_string(x.shape()) + " do not fit the generator");
  }

  Tensor z_rep({b * k, l});
  Tensor x_rep({b * k, d});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t c = 0; c < l; ++c) z_rep(i * k + j, c) = z(i, c);
      for (std::size_t c = 0; c < d; ++c) x_rep(i * k + j, c) = x(i, c);
    }
  }
  const Tensor eps = normal_tensor(rng, b * k, l);

  // z_k = z + eta * eps, reparameterized so that d/d eta flows through g.
  ad::Trace trace(1);
  const auto params = models::bind(trace, generator.params, false);
  const Var eta_v = trace.leaf(Tensor::scalar(eta));
  const Var zk = ad::add(trace.constant(z_rep), ad::mul(eta_v, trace.constant(eps)));
  const Var gk = models::forward(trace, generator.spec, params, zk);
  const double sx2 = config.sigma_x * config.sigma_x;
  const Var resid = ad::sub(trace.constant(x_rep), gk);
  // log N(x; g(z_k), sx^2 I) + log N(z_k; 0, I) - log N(z_k; z, eta^2 I)
  Var logw = ad::scale(ad::sum_rows(ad::square(resid)), -0.5 / sx2);
  logw = ad::sub(logw, ad::scale(ad::sum_rows(ad::square(zk)), 0.5));
  logw = ad::add(logw, ad::scale(ad::log(eta_v), static_cast<double>(l)));
  Tensor eps_term({b * k, 1});
  for (std::size_t r = 0; r < b * k; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < l; ++c) s += eps(r, c) * eps(r, c);
    eps_term(r, 0) = 0.5 * s - 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi * sx2);
  }
  logw = ad::add(logw, trace.constant(eps_term));

  const Tensor& lw = logw.value();
  const Tensor& g = gk.value();
  PosteriorScore out;
  out.score = Tensor({b, d});
  Tensor weights({b * k, 1});
  std::size_t used = 0;
  double log_q_sum = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    bool bad = false;
    for (std::size_t j = 0; j < k; ++j) {
      const double v = lw(i * k + j, 0);
      if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) bad = true;
      m = std::max(m, v);
    }
    if (bad || !std::isfinite(m)) {
      ++out.skipped;
      continue;
    }
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) total += std::exp(lw(i * k + j, 0) - m);
    for (std::size_t j = 0; j < k; ++j) {
      const double w = std::exp(lw(i * k + j, 0) - m) / total;
      weights(i * k + j, 0) = w;
      for (std::size_t c = 0; c < d; ++c) {
        out.score(i, c) += w * (g(i * k + j, c) - x(i, c)) / sx2;
      }
    }
    log_q_sum += m + std::log(total / static_cast<double>(k));
    ++used;
  }
  if (used == 0) return out;
  out.mean_log_q = log_q_sum / static_cast<double>(used);

  // d/d eta of mean_i log mean_j w_ij = mean_i sum_j wbar_ij d log w_ij / d eta.
  const Var weighted = ad::sum(ad::mul(logw, trace.constant(weights)));
  const Var leaves[] = {eta_v};
  out.eta_gradient = trace.grad_wrt(weighted, leaves)[0].item() / static_cast<double>(used);
  return out;
}

VeraStepResult vera_step(const models::Model& ebm, const models::Model& generator,
                         const Tensor& batch, const VeraConfig& config, VeraState& state,
                         Rng& rng) {
  check_vera_config(config);
  const std::size_t b = batch.rows();
  const std::size_t d = batch.cols();
  if (generator.spec.head != models::HeadKind::kOutput || generator.spec.output_dim != d) {
    throw ContractError("vera_step: generator output does not match data dimension");
  }
  const std::size_t l = generator.spec.input_dim;
  const Tensor z = normal_tensor(rng, b, l);
  const Tensor noise = normal_tensor(rng, b, d, config.sigma_x);

  VeraStepResult out;

  // Generator sample x = g(z) + sigma_x * eps.
  ad::Trace gen_trace(1);
  const auto gen_params = models::bind(gen_trace, generator.params, true);
  const Var x_gen = ad::add(models::forward(gen_trace, generator.spec, gen_params,
                                            gen_trace.constant(z)),
                            gen_trace.constant(noise));
  out.samples = x_gen.value();

  // EBM side.
  {
    ad::Trace t(1);
    const auto params = models::bind(t, ebm.params, true);
    const ad::EnergyFn e = [&](ad::Trace& tr, Var in) {
      return models::energy(tr, ebm.spec, params, in);
    };
    const Var loss = cd_loss(t, e, batch, out.samples);
    out.ebm_loss = loss.value().item();
    out.ebm_grad = models::flatten(t.grad_wrt(loss, params));
  }

  const PosteriorScore ps = posterior_score(generator, z, out.samples, state.eta(), config, rng);
  out.skipped = ps.skipped;
  out.entropy_estimate = -ps.mean_log_q;

  // Generator surrogate: mean E(x) + lambda_H * mean <s_hat, x>, s_hat constant.
  const auto ebm_params = models::bind(gen_trace, ebm.params, false);
  const Var e_gen = ad::mean(models::energy(gen_trace, ebm.spec, ebm_params, x_gen));
  Var surrogate = e_gen;
  if (config.entropy_weight > 0.0) {
    const Var inner = ad::sum(ad::mul(gen_trace.constant(ps.score), x_gen));
    surrogate = ad::add(e_gen, ad::scale(inner, config.entropy_weight / static_cast<double>(b)));
  }
  out.generator_loss = e_gen.value().item() - config.entropy_weight * out.entropy_estimate;
  out.generator_grad = models::flatten(gen_trace.grad_wrt(surrogate, gen_params));

  state.update_eta(ps.eta_gradient, config.eta_lr.value_or(config.generator_lr), config);
  out.eta = state.eta();
  return out;
}

}  // namespace ebmlab::objectives

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ebmlab/autodiff.hpp"
#include "ebmlab/model.hpp"
#include "ebmlab/optim.hpp"
#include "ebmlab/rng.hpp"
#include "ebmlab/tensor.hpp"

namespace ebmlab::objectives {

enum class BaseObjective { kSsm, kCd, kVera };

struct JemConfig {
  double gamma = 0.0;  // cross-entropy weight, >= 0
  BaseObjective base = BaseObjective::kCd;
};

// Sliced score matching, variance-reduced form, one projection per row:
//   mean_i [ v_i^T grad_x s(x_i) v_i + 0.5 |s(x_i)|^2 ],  s = -grad_x E.
// Needs an order-2 trace; differentiable with respect to parameters.
ad::Var ssm_vr_loss(ad::Trace& trace, const ad::EnergyFn& energy, const Tensor& x, Rng& rng);
ad::Var ssm_vr_loss(ad::Trace& trace, const ad::EnergyFn& energy, const Tensor& x,
                    const Tensor& projections);

// mean E(data) - mean E(samples); samples enter as constants.
ad::Var cd_loss(ad::Trace& trace, const ad::EnergyFn& energy, const Tensor& data,
                const Tensor& samples);

// mean -log p(x) of a flow-head model.
ad::Var flow_nll(ad::Trace& trace, const models::ModelSpec& spec,
                 std::span<const ad::Var> params, const Tensor& x);

// mean -log softmax(logits)[label].
ad::Var ce_loss(ad::Trace& trace, ad::Var logits, std::span<const int> labels);
double ce_loss(const Tensor& logits, std::span<const int> labels);

// base + gamma * ce. gamma = 0 returns `base` itself.
ad::Var jem_loss(ad::Var base, ad::Var ce, const JemConfig& config);

// ---- VERA --------------------------------------------------------------------

struct VeraConfig {
  double entropy_weight = 1e-4;
  double eta_init = 0.1;
  double eta_min = 0.01;
  double eta_max = 0.3;
  double sigma_x = 0.01;
  std::size_t posterior_samples = 20;
  std::size_t latent_dim = 16;
  std::vector<std::size_t> generator_hidden = {100, 100, 100, 100, 100};
  double ebm_lr = 3e-4;
  double generator_lr = 6e-4;
  double generator_beta1 = 0.0;
  double generator_beta2 = 0.9;
  // Step size of the eta ascent; defaults to generator_lr.
  std::optional<double> eta_lr;
};

// Generator: five leaky-ReLU(0.2) hidden layers of width 100, latent -> data.
models::ModelSpec generator_spec(std::size_t latent_dim, std::size_t output_dim,
                                 std::vector<std::size_t> hidden = {100, 100, 100, 100, 100});

class VeraState {
 public:
  explicit VeraState(const VeraConfig& config);
  double eta() const { return eta_; }
  // Ascent step on eta from a gradient, followed by clamping.
  void update_eta(double gradient, double lr, const VeraConfig& config);
  // Sets a proposed value directly (still clamped).
  void propose_eta(double eta, const VeraConfig& config);

 private:
  double eta_;
  Adam optimizer_;
};

double clamp_eta(double eta, const VeraConfig& config);

struct VeraStepResult {
  double ebm_loss = 0.0;
  double generator_loss = 0.0;
  double entropy_estimate = 0.0;
  double eta = 0.0;
  std::vector<double> ebm_grad;        // flat, EBM parameter layout
  std::vector<double> generator_grad;  // flat, generator parameter layout
  Tensor samples;                      // generated x, B x D
  std::size_t skipped = 0;             // rows with degenerate importance weights
};

// Importance-weighted estimate of grad_x log q(x) at generated points x with
// latent origins z. Returns B x D; rows whose weights are all non-finite are
// zero and counted in `skipped`. Also returns d/d eta of the mean log-mean
// importance weight in `eta_gradient` and the mean log q estimate.
struct PosteriorScore {
  Tensor score;
  double eta_gradient = 0.0;
  double mean_log_q = 0.0;
  std::size_t skipped = 0;
};
PosteriorScore posterior_score(const models::Model& generator, const Tensor& z, const Tensor& x,
                               double eta, const VeraConfig& config, Rng& rng);

// One VERA step: EBM loss mean E(data) - mean E(x_gen) with x_gen constant;
// generator loss mean E(x_gen) - lambda_H * H, whose entropy gradient is
// -mean s(x)^T dx/dphi with the posterior score s held constant. Updates eta.
VeraStepResult vera_step(const models::Model& ebm, const models::Model& generator,
                         const Tensor& batch, const VeraConfig& config, VeraState& state,
                         Rng& rng);

}  // namespace ebmlab::objectives

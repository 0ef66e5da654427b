#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "ebmlab/autodiff.hpp"
#include "ebmlab/rng.hpp"
#include "ebmlab/tensor.hpp"

namespace ebmlab::samplers {

// Per-dimension bounds.
struct Box {
  std::vector<double> lo;
  std::vector<double> hi;

  std::size_t dim() const { return lo.size(); }
  void validate() const;
  Tensor sample(Rng& rng, std::size_t n) const;
  void clamp(Tensor& x) const;
  // Per-column min/max of the rows of x.
  static Box bounding(const Tensor& x);
  // Same center, each half-width multiplied by `factor`.
  Box scaled(double factor) const;
  bool operator==(const Box&) const = default;
};

struct SgldConfig {
  std::size_t steps = 100;
  double step_size = 1.0;    // alpha
  double noise_std = 0.01;   // sigma
  // Welling-Teh pairing: sigma = sqrt(alpha), overriding noise_std.
  bool coupled_noise = false;
  std::optional<Box> clamp;

  void validate() const;
  double sigma() const;
};

// grad_x E summed over rows, i.e. the per-row energy gradients.
Tensor energy_gradient(const ad::EnergyFn& energy, const Tensor& x);

// Called after every step with (step index starting at 1, current points).
using ChainObserver = std::function<void(std::size_t, const Tensor&)>;

// x <- x - (alpha/2) grad_x E(x) + sigma * eps. Parameters enter the energy
// as constants, so nothing about them is recorded. Throws NumericError when a
// gradient or a state turns non-finite.
Tensor sgld_chain(const ad::EnergyFn& energy, const Tensor& x0, const SgldConfig& config,
                  Rng& rng, const ChainObserver& observer = {});

struct ReplayBuffer {
  std::size_t capacity = 10000;
  double reinit_prob = 0.05;
  Box reinit;
  std::vector<std::vector<double>> samples;
  std::size_t cursor = 0;  // next slot for rolling insertion once full

  ReplayBuffer() = default;
  ReplayBuffer(Box reinit_box, std::size_t capacity = 10000, double reinit_prob = 0.05);

  std::size_t size() const { return samples.size(); }
  void validate() const;
};

struct Draw {
  Tensor points;
  // Buffer slot each point came from; nullopt for fresh points.
  std::vector<std::optional<std::size_t>> slots;
  std::size_t fresh = 0;
};

Draw buffer_draw(const ReplayBuffer& buffer, std::size_t n, Rng& rng);

// Writes row i of `samples` into slots[i]; rows without a slot are pushed
// with rolling insertion.
void buffer_write(ReplayBuffer& buffer, const std::vector<std::optional<std::size_t>>& slots,
                  const Tensor& samples);
// Appends rows until capacity, then overwrites the oldest slot.
void buffer_push(ReplayBuffer& buffer, const Tensor& samples);

struct AscentTrajectory {
  std::vector<Tensor> points;           // x_0 .. x_T
  std::vector<std::vector<double>> logp;  // per step, one value per row
  bool diverged = false;
};

// Gradient ascent on log p~ = -E with respect to the inputs.
AscentTrajectory likelihood_ascent(const ad::EnergyFn& energy, const Tensor& x,
                                   std::size_t steps, double lr);

}  // namespace ebmlab::samplers

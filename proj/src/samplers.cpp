#include "ebmlab/samplers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ebmlab/error.hpp"

namespace ebmlab::samplers {

void Box::validate() const {
  if (lo.empty() || lo.size() != hi.size()) throw ContractError("box: bounds must be non-empty and matched");
  for (std::size_t j = 0; j < lo.size(); ++j) {
    if (!(lo[j] <= hi[j])) {
      throw ContractError("box: lo > hi in dimension " + std::to_string(j));
    }
  }
}

Tensor Box::sample(Rng& rng, std::size_t n) const {
  validate();
  Tensor x({n, dim()});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dim(); ++j) x(i, j) = uniform(rng, lo[j], hi[j]);
  }
  return x;
}

void Box::clamp(Tensor& x) const {
  if (x.cols() != dim()) throw ContractError("box: dimension mismatch");
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < dim(); ++j) x(i, j) = std::clamp(x(i, j), lo[j], hi[j]);
  }
}

Box Box::bounding(const Tensor& x) {
  Box b;
  b.lo.assign(x.cols(), 0.0);
  b.hi.assign(x.cols(), 0.0);
  for (std::size_t j = 0; j < x.cols(); ++j) {
    b.lo[j] = b.hi[j] = x(0, j);
    for (std::size_t i = 1; i < x.rows(); ++i) {
      b.lo[j] = std::min(b.lo[j], x(i, j));
      b.hi[j] = std::max(b.hi[j], x(i, j));
    }
  }
  return b;
}

Box Box::scaled(double factor) const {
  Box b = *this;
  for (std::size_t j = 0; j < dim(); ++j) {
    const double c = 0.5 * (lo[j] + hi[j]);
    const double h = 0.5 * (hi[j] - lo[j]) * factor;
    b.lo[j] = c - h;
    b.hi[j] = c + h;
  }
  return b;
}

void SgldConfig::validate() const {
  if (!(step_size > 0.0)) throw ConfigError("sgld: step_size must be > 0");
  if (!(noise_std >= 0.0)) throw ConfigError("sgld: noise_std must be >= 0");
  if (clamp) clamp->validate();
}

double SgldConfig::sigma() const { return coupled_noise ? std::sqrt(step_size) : noise_std; }

Tensor energy_gradient(const ad::EnergyFn& energy, const Tensor& x) {
  ad::Trace trace(1);
  const ad::Var xv = trace.leaf(x);
  const ad::Var leaves[] = {xv};
  return trace.grad_wrt(ad::sum(energy(trace, xv)), leaves)[0];
}

Tensor sgld_chain(const ad::EnergyFn& energy, const Tensor& x0, const SgldConfig& config,
                  Rng& rng, const ChainObserver& observer) {
  config.validate();
  if (!x0.all_finite()) throw NumericError("sgld: starting points are not finite");
  const double half = 0.5 * config.step_size;
  const double sigma = config.sigma();
  Tensor x = x0;
  for (std::size_t t = 1; t <= config.steps; ++t) {
    const Tensor g = energy_gradient(energy, x);
    auto xs = x.data();
    auto gs = g.data();
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (!std::isfinite(gs[i])) {
        throw NumericError("sgld: non-finite energy gradient at step " + std::to_string(t) +
                               ", element " + std::to_string(i),
                           static_cast<std::ptrdiff_t>(i));
      }
      xs[i] -= half * gs[i];
      if (sigma > 0.0) xs[i] += sigma * normal(rng);
    }
    if (config.clamp) config.clamp->clamp(x);
    if (!x.all_finite()) throw NumericError("sgld: chain state diverged at step " + std::to_string(t));
    if (observer) observer(t, x);
  }
  return x;
}

ReplayBuffer::ReplayBuffer(Box reinit_box, std::size_t capacity_, double reinit_prob_)
    : capacity(capacity_), reinit_prob(reinit_prob_), reinit(std::move(reinit_box)) {
  validate();
}

void ReplayBuffer::validate() const {
  if (capacity < 1) throw ConfigError("replay buffer: capacity must be >= 1");
  if (!(reinit_prob >= 0.0 && reinit_prob <= 1.0)) {
    throw ConfigError("replay buffer: reinit probability must lie in [0, 1]");
  }
  reinit.validate();
}

Draw buffer_draw(const ReplayBuffer& buffer, std::size_t n, Rng& rng) {
  if (n < 1) throw ContractError("buffer_draw: n must be >= 1");
  buffer.validate();
  const std::size_t d = buffer.reinit.dim();
  Draw out;
  out.points = Tensor({n, d});
  out.slots.assign(n, std::nullopt);
  for (std::size_t i = 0; i < n; ++i) {
    // The coin is always tossed so the stream consumption does not depend on
    // the buffer contents.
    const bool fresh = uniform(rng) < buffer.reinit_prob || buffer.samples.empty();
    if (fresh) {
      for (std::size_t j = 0; j < d; ++j) out.points(i, j) = uniform(rng, buffer.reinit.lo[j], buffer.reinit.hi[j]);
      ++out.fresh;
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, buffer.samples.size() - 1);
      const std::size_t slot = pick(rng);
      const auto& s = buffer.samples[slot];
      for (std::size_t j = 0; j < d; ++j) out.points(i, j) = s[j];
      out.slots[i] = slot;
    }
  }
  return out;
}

namespace {

void push_row(ReplayBuffer& buffer, std::vector<double> row) {
  if (buffer.samples.size() < buffer.capacity) {
    buffer.samples.push_back(std::move(row));
    return;
  }
  buffer.samples[buffer.cursor] = std::move(row);
  buffer.cursor = (buffer.cursor + 1) % buffer.capacity;
}

}  // namespace

void buffer_write(ReplayBuffer& buffer, const std::vector<std::optional<std::size_t>>& slots,
                  const Tensor& samples) {
  if (slots.size() != samples.rows()) throw ContractError("buffer_write: one slot per row required");
  if (samples.cols() != buffer.reinit.dim()) throw ContractError("buffer_write: dimension mismatch");
  for (const auto& s : slots) {
    if (s && *s >= buffer.samples.size()) {
      throw ContractError("buffer_write: slot " + std::to_string(*s) + " out of range (size " +
                          std::to_string(buffer.samples.size()) + ")");
    }
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i]) {
      buffer.samples[*slots[i]] = samples.row_vector(i);
    } else {
      push_row(buffer, samples.row_vector(i));
    }
  }
}

void buffer_push(ReplayBuffer& buffer, const Tensor& samples) {
  if (samples.cols() != buffer.reinit.dim()) throw ContractError("buffer_push: dimension mismatch");
  for (std::size_t i = 0; i < samples.rows(); ++i) push_row(buffer, samples.row_vector(i));
}

AscentTrajectory likelihood_ascent(const ad::EnergyFn& energy, const Tensor& x, std::size_t steps,
                                   double lr) {
  if (!(lr > 0.0)) throw ContractError("likelihood_ascent: lr must be > 0");
  AscentTrajectory out;
  Tensor cur = x;
  auto logp_of = [&](const Tensor& at, Tensor* grad) {
    ad::Trace trace(1);
    const ad::Var xv = trace.leaf(at);
    const ad::Var e = energy(trace, xv);
    std::vector<double> lp(e.value().values());
    for (auto& v : lp) v = -v;
    if (grad) {
      const ad::Var leaves[] = {xv};
      *grad = trace.grad_wrt(ad::sum(e), leaves)[0];
    }
    return lp;
  };
  auto finite = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double a) { return std::isfinite(a); });
  };

  Tensor grad;
  std::vector<double> lp = logp_of(cur, &grad);
  out.points.push_back(cur);
  out.logp.push_back(lp);
  if (!finite(lp)) {
    out.diverged = true;
    return out;
  }
  for (std::size_t t = 0; t < steps; ++t) {
    auto xs = cur.data();
    auto gs = grad.data();
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] -= lr * gs[i];  // ascent on -E
    if (!cur.all_finite() || !grad.all_finite()) {
      out.diverged = true;
      break;
    }
    lp = logp_of(cur, &grad);
    if (!finite(lp)) {
      out.diverged = true;
      break;
    }
    out.points.push_back(cur);
    out.logp.push_back(lp);
  }
  return out;
}

}  // namespace ebmlab::samplers

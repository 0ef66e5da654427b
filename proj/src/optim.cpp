#include "ebmlab/optim.hpp"

#include <algorithm>
#include <cmath>

#include "ebmlab/error.hpp"

namespace ebmlab {

Adam::Adam(std::size_t n, AdamSettings settings) : s_(settings), m_(n, 0.0), v_(n, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grad, double lr) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw ContractError("Adam: parameter/gradient length mismatch");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i] + s_.weight_decay * params[i];
    m_[i] = s_.beta1 * m_[i] + (1.0 - s_.beta1) * g;
    v_[i] = s_.beta2 * v_[i] + (1.0 - s_.beta2) * g * g;
    const double mhat = c1 > 0 ? m_[i] / c1 : m_[i];
    params[i] -= lr * mhat / (std::sqrt(v_[i] / c2) + s_.eps);
  }
}

void Adam::ascend(std::span<double> params, std::span<const double> grad, double lr) {
  std::vector<double> negated(grad.begin(), grad.end());
  for (auto& g : negated) g = -g;
  step(params, negated, lr);
}

double warmup_lr(double base_lr, std::size_t step, std::size_t warmup_steps) {
  if (warmup_steps == 0) return base_lr;
  return base_lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(warmup_steps));
}

}  // namespace ebmlab

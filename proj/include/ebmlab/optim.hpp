#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace ebmlab {

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // L2 penalty folded into the gradient (classic Adam weight decay).
  double weight_decay = 0.0;
};

class Adam {
 public:
  Adam(std::size_t n, AdamSettings settings = {});

  // One descent step on `params` with learning rate `lr`.
  void step(std::span<double> params, std::span<const double> grad, double lr);
  // Ascent variant, used for scalar variational parameters.
  void ascend(std::span<double> params, std::span<const double> grad, double lr);

  std::size_t steps() const { return t_; }

 private:
  AdamSettings s_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

// Linear warm-up: base_lr * min(1, step / warmup_steps).
double warmup_lr(double base_lr, std::size_t step, std::size_t warmup_steps = 2500);

}  // namespace ebmlab

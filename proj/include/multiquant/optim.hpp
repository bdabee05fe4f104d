#pragma once

#include <unordered_map>
#include <vector>

#include "multiquant/tensor.hpp"

namespace mq {

// v <- mu*v + g + lambda*theta; theta <- theta - eta*v
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum, double weight_decay)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<Tensor>& params);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  int64_t step_count() const { return steps_; }

 private:
  double lr_, momentum_, weight_decay_;
  int64_t steps_ = 0;
  std::unordered_map<const TensorData*, std::vector<double>> velocity_;
};

// bias-corrected Adam; aborts on nonfinite gradients
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
       double weight_decay = 0.0)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void step(const std::vector<Tensor>& params);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  int64_t step_count() const { return steps_; }

 private:
  struct Moments {
    std::vector<double> m, v;
    int64_t t = 0;  // per-parameter step count (parameters can join late)
  };
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  int64_t steps_ = 0;
  std::unordered_map<const TensorData*, Moments> moments_;
};

}  // namespace mq

#pragma once

#include <functional>

#include "multiquant/tensor.hpp"

namespace mq {

struct GradCheckResult {
  double max_rel_err = 0.0;
  size_t checked = 0;
  size_t skipped = 0;
  // false when every element was skipped: inconclusive, NOT a pass
  bool conclusive = false;
};

// Central differences against a supplied autodiff gradient. loss_fn must
// re-evaluate the loss deterministically for the current parameter values.
// kink_distance, when given, returns the distance from element i to the
// nearest non-smooth point; elements closer than 2*epsilon are skipped.
GradCheckResult finite_diff_check(
    const std::function<double()>& loss_fn, const Tensor& param,
    const std::vector<double>& autodiff_grad, double epsilon,
    const std::function<double(size_t)>& kink_distance = nullptr);

}  // namespace mq

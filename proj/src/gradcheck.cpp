#include "multiquant/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace mq {

GradCheckResult finite_diff_check(const std::function<double()>& loss_fn, const Tensor& param,
                                  const std::vector<double>& autodiff_grad, double epsilon,
                                  const std::function<double(size_t)>& kink_distance) {
  if (epsilon <= 0.0) throw std::invalid_argument("finite_diff_check: epsilon must be positive");
  if (autodiff_grad.size() != param->v.size())
    throw std::invalid_argument("finite_diff_check: gradient size mismatch");

  GradCheckResult res;
  for (size_t i = 0; i < param->v.size(); ++i) {
    if (kink_distance && kink_distance(i) < 2.0 * epsilon) {
      ++res.skipped;
      continue;
    }
    const double saved = param->v[i];
    param->v[i] = saved + epsilon;
    const double lp = loss_fn();
    param->v[i] = saved - epsilon;
    const double lm = loss_fn();
    param->v[i] = saved;

    const double fd = (lp - lm) / (2.0 * epsilon);
    const double ad = autodiff_grad[i];
    const double scale = std::max({std::fabs(fd), std::fabs(ad), 1e-8});
    const double rel = std::fabs(fd - ad) / scale;
    res.max_rel_err = std::max(res.max_rel_err, rel);
    ++res.checked;
  }
  res.conclusive = res.checked > 0;
  return res;
}

}  // namespace mq

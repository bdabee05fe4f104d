#include "multiquant/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace mq {

void SgdMomentum::step(const std::vector<Tensor>& params) {
  ++steps_;
  for (const auto& p : params) {
    if (!p->requires_grad) continue;
    p->ensure_grad();
    auto& vel = velocity_[p.get()];
    if (vel.size() != p->v.size()) vel.assign(p->v.size(), 0.0);
    for (size_t i = 0; i < p->v.size(); ++i) {
      const double g = p->g[i] + weight_decay_ * p->v[i];
      vel[i] = momentum_ * vel[i] + g;
      p->v[i] -= lr_ * vel[i];
    }
  }
}

void Adam::step(const std::vector<Tensor>& params) {
  ++steps_;
  for (const auto& p : params) {
    if (!p->requires_grad) continue;
    p->ensure_grad();
    auto& mom = moments_[p.get()];
    if (mom.m.size() != p->v.size()) {
      mom.m.assign(p->v.size(), 0.0);
      mom.v.assign(p->v.size(), 0.0);
      mom.t = 0;
    }
    ++mom.t;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(mom.t));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(mom.t));
    for (size_t i = 0; i < p->v.size(); ++i) {
      const double g = p->g[i] + weight_decay_ * p->v[i];
      if (!std::isfinite(g))
        throw std::runtime_error("adam: nonfinite gradient in parameter '" + p->name + "'");
      mom.m[i] = beta1_ * mom.m[i] + (1.0 - beta1_) * g;
      mom.v[i] = beta2_ * mom.v[i] + (1.0 - beta2_) * g * g;
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      p->v[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

}  // namespace mq

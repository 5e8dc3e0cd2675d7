#pragma once

#include <vector>

#include "isg/autodiff.hpp"

namespace isg {

// SGD with classical momentum: v <- mu * v + g, p <- p - lr * v.
// Velocity slots are matched to parameters by position, so the parameter
// list must be identical (same vars, same order) on every step.
template <class S>
struct SgdMomentumT {
  double lr = 1e-3;
  double mu = 0.9;
  std::vector<std::vector<S>> velocity;

  explicit SgdMomentumT(double lr_, double mu_ = 0.9) : lr(lr_), mu(mu_) {}

  void step(const std::vector<VarT<S>>& params) {
    if (velocity.empty()) {
      velocity.reserve(params.size());
      for (const auto& p : params) velocity.emplace_back(p->value.numel(), S(0));
    }
    require(velocity.size() == params.size(), Err::ShapeMismatch,
            "optimizer parameter list changed between steps");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      auto& v = velocity[i];
      require(v.size() == p->value.numel(), Err::ShapeMismatch,
              "optimizer parameter shape changed between steps");
      const std::size_t n = v.size();
      for (std::size_t j = 0; j < n; ++j) {
        v[j] = static_cast<S>(mu) * v[j] + p->grad.data[j];
        p->value.data[j] -= static_cast<S>(lr) * v[j];
      }
    }
  }
};

using SgdMomentum = SgdMomentumT<double>;

}  // namespace isg

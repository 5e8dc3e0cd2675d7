#pragma once

#include <cmath>
#include <vector>

#include "isg/autodiff.hpp"

namespace isg {

// Central-difference verification of reverse-mode gradients. `make_loss`
// rebuilds the scalar loss from the current parameter values on a fresh
// graph each call; the parameters themselves are perturbed in place and
// restored. Returns the worst relative error over every element of every
// parameter, with rel(a, n) = |a - n| / max(|a|, |n|, 1e-8).
template <class S, class F>
double grad_check(F&& make_loss, const std::vector<VarT<S>>& params, double eps = 1e-5) {
  for (const auto& p : params)
    require(p->requires_grad, Err::InvalidConfig, "grad_check parameter lacks requires_grad");

  auto eval = [&]() -> double {
    GraphT<S> g;
    auto loss = make_loss(g);
    require(loss->value.numel() == 1, Err::ShapeMismatch, "grad_check loss must be scalar");
    const double v = static_cast<double>(loss->value.data[0]);
    require(std::isfinite(v), Err::NonFiniteValue, "grad_check loss is not finite");
    return v;
  };

  std::vector<std::vector<S>> analytic(params.size());
  {
    for (const auto& p : params) zero_grad(p);
    GraphT<S> g;
    auto loss = make_loss(g);
    require(loss->value.numel() == 1, Err::ShapeMismatch, "grad_check loss must be scalar");
    require(std::isfinite(static_cast<double>(loss->value.data[0])), Err::NonFiniteValue,
            "grad_check loss is not finite");
    g.backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) analytic[i] = params[i]->grad.data;
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& data = params[i]->value.data;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const S keep = data[j];
      data[j] = keep + static_cast<S>(eps);
      const double up = eval();
      data[j] = keep - static_cast<S>(eps);
      const double dn = eval();
      data[j] = keep;
      const double numeric = (up - dn) / (2.0 * eps);
      require(std::isfinite(numeric), Err::NonFiniteValue, "grad_check numeric gradient is not finite");
      const double a = static_cast<double>(analytic[i][j]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace isg

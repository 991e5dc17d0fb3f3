#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "qds/errors.hpp"
#include "qds/tensor.hpp"

namespace qds {

/// Compares reverse-mode gradients of a scalar function against central
/// differences. Returns max |analytic - fd| / (|fd| + 1e-8) over all checked
/// coordinates. `stride` > 1 checks every stride-th coordinate of each param.
inline double finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps = 1e-4,
                                std::size_t stride = 1) {
  for (auto& p : params) {
    if (!p.is_leaf() || !p.requires_grad()) throw ContractError("finite_diff_check: params must be grad leaves");
    p.zero_grad();
  }
  Tensor loss = f();
  if (!std::isfinite(loss.item())) throw NumericError("finite_diff_check: non-finite loss");
  backward(loss);

  auto eval = [&] {
    NoGradGuard ng;
    const double v = f().item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite loss under perturbation");
    return v;
  };
  double worst = 0.0;
  for (auto& p : params) {
    auto values = p.mutable_data();
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    for (std::size_t i = 0; i < values.size(); i += std::max<std::size_t>(stride, 1)) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double up = eval();
      values[i] = orig - eps;
      const double down = eval();
      values[i] = orig;
      const double fd = (up - down) / (2.0 * eps);
      worst = std::max(worst, std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-8));
    }
  }
  return worst;
}

}  // namespace qds

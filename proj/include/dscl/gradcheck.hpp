#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dscl/autograd.hpp"

namespace dscl {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares reverse-mode gradients of a scalar function against central differences.
// The function must rebuild its graph from the current parameter values on every call.
// Error per coordinate is |analytic - numeric| / max(1, |numeric|).
inline GradCheckResult finite_difference_check(const std::function<Var()>& f, std::vector<Var> params,
                                               double step = 1e-5) {
  for (Var& p : params) p.zero_grad();
  Var root = f();
  if (!std::isfinite(root.item())) throw NumericalError("gradient oracle: non-finite value at the base point");
  root.backward();

  GradCheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Var& p = params[k];
    const Tensor analytic = p.has_grad() ? p.grad() : Tensor(p.shape(), 0.0);
    Tensor& val = p.value_mut();
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double orig = val[i];
      val[i] = orig + step;
      const double fp = f().item();
      val[i] = orig - step;
      const double fm = f().item();
      val[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericalError("gradient oracle: non-finite value perturbing parameter " + std::to_string(k) +
                             " index " + std::to_string(i));
      }
      const double numeric = (fp - fm) / (2.0 * step);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      if (err > res.max_relative_error || (k == 0 && i == 0)) {
        res = {err, k, i, analytic[i], numeric};
      }
    }
  }
  return res;
}

}  // namespace dscl

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "poi/tape.hpp"

namespace poi {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences. `f` builds the function on a fresh tape from the current
/// values of `params` and returns the scalar output.
///
/// Relative error per coordinate is |a - n| / max(1, |a|, |n|).
inline GradCheckResult grad_check(const std::function<Var(Tape&)>& f, const std::vector<Tensor*>& params,
                                  double h = 1e-5) {
  auto evaluate = [&]() {
    Tape tape;
    const double v = f(tape).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: function value is not finite");
    return v;
  };

  for (Tensor* p : params) {
    p->requires_grad = true;
    p->grad.assign(p->data.size(), 0.0);
  }
  {
    Tape tape;
    Var out = f(tape);
    if (!std::isfinite(out.item())) throw NumericError("grad_check: function value is not finite");
    tape.backward(out);
  }

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    for (std::size_t k = 0; k < p.data.size(); ++k) {
      const double saved = p.data[k];
      p.data[k] = saved + h;
      const double up = evaluate();
      p.data[k] = saved - h;
      const double down = evaluate();
      p.data[k] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p.grad[k];
      const double err =
          std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
      ++result.coordinates;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = pi;
        result.worst_index = k;
      }
    }
  }
  return result;
}

}  // namespace poi

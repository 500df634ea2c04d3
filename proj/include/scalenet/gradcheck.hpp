#pragma once

#include <cmath>
#include <functional>

#include "scalenet/errors.hpp"
#include "scalenet/tensor.hpp"

namespace scalenet {

// Compares reverse-mode gradients of a scalar-valued function against
// central finite differences, probing every coordinate of x. Returns the
// worst relative error max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
// Meant to be instantiated with Real = double; float lacks the headroom for
// tight tolerances.
template <class Real, class Fn>
Real finite_difference_check(Fn&& f, Tensor<Real> x, Real h) {
  if (!(h > Real(0))) {
    throw contract_error("finite_difference_check: step must be positive");
  }
  x.set_requires_grad(true);
  // A previous check may have spilled gradient into x through a shared
  // closure; reverse passes accumulate, so start from a clean buffer.
  x.zero_grad();
  std::vector<Real> analytic;
  {
    TapeScope<Real> scope;
    Tensor<Real> y = f(x);
    if (y.size() != 1) {
      throw contract_error(
          "finite_difference_check: function must return a scalar, got " +
          shape_str(y.shape()));
    }
    backward(y);
    analytic = x.has_grad() ? x.grad() : std::vector<Real>(x.size(), Real(0));
  }
  x.zero_grad();

  Real worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real saved = x.data()[i];
    x.data()[i] = saved + h;
    const Real up = f(x).item();
    x.data()[i] = saved - h;
    const Real down = f(x).item();
    x.data()[i] = saved;
    const Real numeric = (up - down) / (Real(2) * h);
    const Real denom = std::max(Real(1), std::abs(analytic[i]));
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace scalenet

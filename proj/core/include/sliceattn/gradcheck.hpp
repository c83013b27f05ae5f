#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "sliceattn/ops.hpp"
#include "sliceattn/tensor.hpp"

namespace sliceattn {

// Compares analytic gradients against central finite differences over every
// element of every parameter. The builder must be deterministic and rebuild
// the whole forward graph on each call (it is evaluated 2 * n_params + 1
// times). Relative error uses max(1, |analytic|, |numeric|) as denominator.
template <typename S>
double grad_check(const std::function<TensorT<S>()>& build_loss,
                  const std::vector<TensorT<S>*>& params, double h = 1e-5) {
  std::vector<std::vector<S>> analytic;
  {
    for (auto* p : params) p->set_requires_grad(true);
    TapeT<S> tape;
    TensorT<S> loss = build_loss();
    tape.run_backward(loss);
    for (auto* p : params) analytic.push_back(*p->grad);
  }

  double max_err = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    TensorT<S>* p = params[pi];
    p->requires_grad = false;  // finite differences run without a tape
    for (std::size_t i = 0; i < p->data->size(); ++i) {
      const S orig = (*p->data)[i];
      (*p->data)[i] = orig + static_cast<S>(h);
      const double fp = static_cast<double>(build_loss().item());
      (*p->data)[i] = orig - static_cast<S>(h);
      const double fm = static_cast<double>(build_loss().item());
      (*p->data)[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = static_cast<double>(analytic[pi][i]);
      const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
      max_err = std::max(max_err, std::fabs(a - numeric) / denom);
    }
    p->requires_grad = true;
  }
  return max_err;
}

}  // namespace sliceattn

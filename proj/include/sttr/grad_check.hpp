#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "sttr/tensor.hpp"

namespace sttr {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences, element by element. `indices` restricts the comparison to a
/// subset of x; empty means every element.
///
/// The relative error of one element is
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
template <typename T>
GradCheckResult grad_check_detailed(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f,
                                    BasicTensor<T> x, double eps,
                                    const std::vector<std::size_t>& indices = {}) {
  const bool was_requiring = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  {
    auto loss = f(x);
    backward(loss);
  }
  const std::vector<T> analytic(x.grad().begin(), x.grad().end());
  x.drop_grad();

  std::vector<std::size_t> probe = indices;
  if (probe.empty()) {
    probe.resize(x.numel());
    for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = i;
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t i : probe) {
    const T saved = x.data()[i];
    x.data()[i] = saved + static_cast<T>(eps);
    const double up = static_cast<double>(f(x).item());
    x.data()[i] = saved - static_cast<T>(eps);
    const double down = static_cast<double>(f(x).item());
    x.data()[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > result.max_rel_error || (i == probe.front() && result.max_rel_error == 0.0)) {
      result = {rel, i, a, numeric};
    }
  }
  x.set_requires_grad(was_requiring);
  return result;
}

template <typename T>
double grad_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& f,
                  const BasicTensor<T>& x, double eps) {
  return grad_check_detailed<T>(f, x, eps).max_rel_error;
}

}  // namespace sttr

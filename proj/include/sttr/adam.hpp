#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sttr/error.hpp"
#include "sttr/nn.hpp"
#include "sttr/tensor.hpp"

namespace sttr {

/// A parameter in the store was never reached by backward().
class MissingGradientError : public Error {
 public:
  using Error::Error;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::uint64_t step = 0;

  explicit AdamState(const ParameterStore<T>& params, AdamConfig cfg = {}) : config(cfg) {
    for (const auto& e : params.entries()) {
      first_moment.emplace_back(e.tensor.numel(), T{0});
      second_moment.emplace_back(e.tensor.numel(), T{0});
    }
  }
};

/// One bias-corrected Adam update over every parameter in the store, then
/// clears the gradients.
template <typename T>
void adam_step(ParameterStore<T>& params, AdamState<T>& state, double lr) {
  const auto& entries = params.entries();
  if (entries.size() != state.first_moment.size()) {
    throw ShapeError("Adam state does not match the parameter store");
  }
  for (const auto& e : entries) {
    if (!e.tensor.has_grad()) throw MissingGradientError("no gradient for parameter " + e.name);
  }
  ++state.step;
  const double b1 = state.config.beta1;
  const double b2 = state.config.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto tensor = entries[p].tensor;
    auto values = tensor.data();
    const auto grads = std::as_const(tensor).grad();
    auto& m = state.first_moment[p];
    auto& v = state.second_moment[p];
    if (m.size() != values.size()) throw ShapeError("Adam moment shape mismatch for " + entries[p].name);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = static_cast<double>(grads[i]);
      const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * g;
      const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double m_hat = mi / correction1;
      const double v_hat = vi / correction2;
      values[i] = static_cast<T>(static_cast<double>(values[i]) -
                                 lr * m_hat / (std::sqrt(v_hat) + state.config.epsilon));
    }
  }
  params.zero_grad();
}

}  // namespace sttr

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "modt/errors.hpp"

namespace modt::diff {

/// Central-difference gradient of a scalar function of `params`. The step for
/// coordinate i is h * max(1, |p_i|). `params` is perturbed in place and
/// restored exactly before returning.
template <class T>
std::vector<T> finite_diff_grad(const std::function<T()>& f, std::span<T> params, T h) {
  if (!(h > T(0))) throw ContractViolation("finite_diff_grad: step must be positive");
  std::vector<T> out(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T saved = params[i];
    const T step = h * std::max(T(1), std::abs(saved));
    params[i] = saved + step;
    const T up = f();
    params[i] = saved - step;
    const T down = f();
    params[i] = saved;
    out[i] = (up - down) / (T(2) * step);
  }
  return out;
}

/// |a - b| / max(|a|, |b|, floor)
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace modt::diff

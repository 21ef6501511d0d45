#pragma once

#include <vector>

#include "mtsc/rng.hpp"
#include "mtsc/tensor.hpp"

namespace mtsc::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = a.size() == b.size() ? 0.0 : 1e300;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace mtsc::testing

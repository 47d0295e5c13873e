#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "gdnsq/rng.hpp"
#include "gdnsq/tensor.hpp"

namespace gdnsq::test {

inline std::vector<double> normal_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * rng.normal();
  return v;
}

// Central differences of f() with respect to every element of `leaf`.
inline std::vector<double> numeric_grad(Tensor& leaf, const std::function<double()>& f, double h = 1e-6) {
  std::vector<double> g(leaf.numel());
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < leaf.numel(); ++i) {
    const double v = leaf[i];
    leaf.mutable_data()[i] = v + h;
    const double fp = f();
    leaf.mutable_data()[i] = v - h;
    const double fm = f();
    leaf.mutable_data()[i] = v;
    g[i] = (fp - fm) / (2 * h);
  }
  return g;
}

inline double max_rel_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor}));
  }
  return worst;
}

}  // namespace gdnsq::test

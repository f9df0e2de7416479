#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dst/numcore/tape.hpp"
#include "dst/numcore/tensor.hpp"

namespace dst::testing {

using num::Tensor;

inline Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t = Tensor::matrix(r, c);
  for (auto& x : t.storage()) x = n(rng);
  return t;
}

// Central finite differences of f at x, step h.
inline Tensor numeric_grad(const std::function<double(const Tensor&)>& f, Tensor x, double h = 1e-5) {
  Tensor g = num::zeros_like(x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// max|a-b| / max(max|a|, max|b|, tiny)
inline double rel_error(const Tensor& a, const Tensor& b) {
  double diff = 0.0, mag = 1e-12;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    mag = std::max({mag, std::abs(a[i]), std::abs(b[i])});
  }
  return diff / mag;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace dst::testing

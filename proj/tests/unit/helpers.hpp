#pragma once

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>

#include "robustq/nets.hpp"
#include "robustq/rng.hpp"
#include "robustq/tensor.hpp"

namespace testing {

using namespace robustq;

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Central differences written out by hand; independent of grad_check.
inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  Tensor g(x.shape());
  Tensor p = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    p[i] = x[i] + h;
    const double up = f(p);
    p[i] = x[i] - h;
    const double down = f(p);
    p[i] = x[i];
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double rel_error(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({1.0, std::abs(a[i]), std::abs(b[i])}));
  return worst;
}

inline double scalar_of(const Tape& t, ValueId id) { return t.value(id)[0]; }

inline NetworkSpec tiny_spec(std::size_t c = 1, std::size_t hw = 8) {
  NetworkSpec s;
  s.in_channels = c;
  s.height = s.width = hw;
  s.widths = {4, 8};
  s.blocks = {1, 1};
  s.num_classes = 3;
  return s;
}

inline double linf(const Tensor& a, const Tensor& b) { return max_abs_diff(a, b); }

}  // namespace testing

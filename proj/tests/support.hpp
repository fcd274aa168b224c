#pragma once

// Shared helpers for the test binaries.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "conjflow/random.hpp"
#include "conjflow/tensor.hpp"

namespace testing_support {

using conjflow::Rng;
using conjflow::Tensor;

template <typename T>
Tensor<T> random_tensor(int c, int h, int w, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<T> t(c, h, w);
  for (auto& v : t.storage()) v = static_cast<T>(conjflow::uniform(rng, lo, hi));
  return t;
}

/// Central difference of f with respect to x.
template <typename T>
T central_difference(const std::function<T()>& f, T& x, T h) {
  const T keep = x;
  x = keep + h;
  const T fp = f();
  x = keep - h;
  const T fm = f();
  x = keep;
  return (fp - fm) / (2 * h);
}

/// |a - b| / max(|a|, |b|, floor).
template <typename T>
double rel_error(T a, T b, double floor = 1e-6) {
  using std::abs;
  return double(abs(a - b) / std::max({abs(a), abs(b), static_cast<T>(floor)}));
}

struct GradCheck {
  double max_rel = 0;
  std::size_t checked = 0;
};

/// Compares analytic gradient entries against central differences on `count` random coordinates of x
/// (every coordinate when count >= x.size()).
template <typename T>
GradCheck check_gradient(std::span<T> x, std::span<const T> analytic, const std::function<T()>& f, Rng& rng,
                         std::size_t count, T h = T(1e-7), double floor = 1e-6) {
  GradCheck r;
  for (std::size_t k = 0; k < count && k < x.size(); ++k) {
    const std::size_t i = count >= x.size() ? k : conjflow::uniform_index(rng, x.size());
    const T num = central_difference<T>(f, x[i], h);
    r.max_rel = std::max(r.max_rel, rel_error(analytic[i], num, floor));
    ++r.checked;
  }
  return r;
}

}  // namespace testing_support

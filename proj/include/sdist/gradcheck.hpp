#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "sdist/tensor.hpp"

namespace sdist {

struct GradCheckOptions {
  double eps = 1e-6;
  std::size_t coordinates = 20;
  std::uint64_t seed = 0;
  /// Lower bound on the error denominator. Single precision uses 1 so that
  /// near-zero gradients are judged on absolute error.
  double floor = 1e-12;
};

/// Compares the recorded gradient of a scalar function against central
/// differences at randomly sampled coordinates of `theta`.
///
/// `f` must rebuild the computation from the current values of `theta` on
/// every call. Returns max |analytic - numeric| / max(|analytic| + |numeric|, floor).
template <typename T, typename F>
double grad_check(F&& f, Tensor<T>& theta, GradCheckOptions opt = {}) {
  theta.set_requires_grad(true);
  theta.clear_grad();
  {
    auto loss = f();
    backward(loss);
  }
  std::vector<T> analytic(theta.numel(), T{0});
  if (theta.has_grad()) std::copy(theta.grad().begin(), theta.grad().end(), analytic.begin());

  std::vector<std::size_t> coords(theta.numel());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  if (coords.size() > opt.coordinates) {
    std::mt19937_64 rng(opt.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opt.coordinates);
  }

  NoGradGuard no_grad;
  auto values = theta.mutable_data();
  double worst = 0.0;
  for (auto c : coords) {
    const T saved = values[c];
    values[c] = saved + static_cast<T>(opt.eps);
    const double plus = static_cast<double>(f().item());
    values[c] = saved - static_cast<T>(opt.eps);
    const double minus = static_cast<double>(f().item());
    values[c] = saved;
    const double numeric = (plus - minus) / (2.0 * opt.eps);
    const double a = static_cast<double>(analytic[c]);
    worst = std::max(worst, std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), opt.floor));
  }
  theta.clear_grad();
  return worst;
}

}  // namespace sdist

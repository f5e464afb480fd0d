#pragma once

// Central finite-difference oracle used by the gradient tests. It only reads
// loss values, so it is independent of the backward implementation.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "concept_lattice/tensor.hpp"

namespace concept_lattice::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true,
                            double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Compares backward() of `loss_fn` against central differences with step h
/// for every element of every tensor in `leaves`.
///
/// Relative error per element is |a - n| / max(|a|, |n|, floor); the floor
/// keeps components that are zero up to rounding from dominating.
inline GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> leaves,
                                  double h = 1e-5, double floor = 1e-5) {
  for (auto& leaf : leaves) leaf.zero_grad();
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  for (auto& leaf : leaves) {
    analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
    if (analytic.back().empty()) analytic.back().assign(leaf.size(), 0.0);
    leaf.zero_grad();
  }

  GradCheckResult result;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto data = leaves[l].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss_fn().item();
      data[i] = saved - h;
      const double down = loss_fn().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[l][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace concept_lattice::testing

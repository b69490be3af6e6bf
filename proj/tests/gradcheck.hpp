#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "taffseg/autodiff.hpp"
#include "taffseg/random.hpp"

namespace taff::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  int coordinates = 0;
};

// Compares backprop gradients of a scalar loss against central differences
// at `per_param` randomly chosen coordinates of every tensor in `params`.
// Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
// round-off on near-zero gradients from dominating.
inline GradCheckResult gradcheck(const std::function<ad::Var()>& loss, std::vector<ad::Var> params,
                                 int per_param, std::uint64_t seed, double h = 1e-5, double floor = 1e-6) {
  for (auto& p : params) p.zero_grad();
  ad::Var l = loss();
  ad::backward(l);
  Rng rng(seed);
  GradCheckResult out;
  for (auto& p : params) {
    const Tensor analytic = p.grad().empty() ? Tensor(p.shape(), 0.0) : p.grad();
    const int n = static_cast<int>(p.value().size());
    for (int s = 0; s < std::min(per_param, n); ++s) {
      const std::size_t k = per_param >= n ? static_cast<std::size_t>(s) : rng.below(n);
      const double orig = p.value()[k];
      double lp, lm;
      {
        ad::NoGradGuard ng;
        p.mutable_value()[k] = orig + h;
        lp = loss().item();
        p.mutable_value()[k] = orig - h;
        lm = loss().item();
        p.mutable_value()[k] = orig;
      }
      const double num = (lp - lm) / (2.0 * h);
      const double a = analytic[k];
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
      out.max_rel_error = std::max(out.max_rel_error, rel);
      ++out.coordinates;
    }
  }
  return out;
}

inline Tensor random_tensor(const Shape& shape, Rng& rng, double sd = 1.0) {
  Tensor t(shape);
  for (auto& v : t.values()) v = sd * rng.normal();
  return t;
}

}  // namespace taff::testing

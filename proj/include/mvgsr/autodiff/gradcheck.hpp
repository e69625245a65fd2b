#pragma once

// Central-difference gradient checker. Coordinates whose +-h perturbation
// changes the branch taken at any relu/abs are excluded from the max.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mvgsr/autodiff/tensor.hpp"

namespace mvgsr::ad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  std::size_t worst_input = 0, worst_index = 0;  // location of max_rel_error
  double worst_analytic = 0.0, worst_numeric = 0.0;
};

using ScalarFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

namespace detail {

struct KinkScope {
  KinkScope() : saved(KinkMonitor::current()) {
    KinkMonitor::current() = KinkMonitor{};
    KinkMonitor::current().active = true;
  }
  ~KinkScope() { KinkMonitor::current() = saved; }
  std::uint64_t hash() const { return KinkMonitor::current().hash; }
  KinkMonitor saved;
};

inline std::pair<double, std::uint64_t> eval_traced(const ScalarFn& f, const std::vector<Tensor<double>>& inputs) {
  NoGradGuard ng;
  KinkScope scope;
  const double v = f(inputs).item();
  return {v, scope.hash()};
}

}  // namespace detail

/// Every input with requires_grad set is checked coordinate by coordinate.
/// The relative error is |a - n| / max(|a| + |n|, floor); the floor keeps
/// finite-difference truncation and roundoff (about 1e-10 at h = 1e-5) on
/// near-zero gradients from dominating the maximum.
inline GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor<double>> inputs, double h = 1e-5,
                                  double floor = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  std::uint64_t base_hash;
  {
    detail::KinkScope scope;
    Tensor<double> loss = f(inputs);
    base_hash = scope.hash();
    backward(loss);
  }

  GradCheckResult res;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    if (!t.requires_grad()) continue;
    std::vector<double> analytic = t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double x0 = t.data()[i];
      t.data()[i] = x0 + h;
      const auto [fp, hp] = detail::eval_traced(f, inputs);
      t.data()[i] = x0 - h;
      const auto [fm, hm] = detail::eval_traced(f, inputs);
      t.data()[i] = x0;
      if (hp != base_hash || hm != base_hash) {
        ++res.excluded;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max(floor, std::abs(a) + std::abs(numeric));
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_input = ti;
        res.worst_index = i;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
      ++res.checked;
    }
  }
  return res;
}

}  // namespace mvgsr::ad

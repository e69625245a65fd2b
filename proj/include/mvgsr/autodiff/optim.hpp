#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "mvgsr/autodiff/tensor.hpp"
#include "mvgsr/error.hpp"

namespace mvgsr::ad {

/// Cosine annealing from `start` at t=0 to `end` at t=total-1. Both
/// endpoints are returned exactly.
inline double cosine_lr(std::size_t t, std::size_t total, double start, double end) {
  if (total <= 1 || t == 0) return start;
  if (t >= total - 1) return end;
  const double w = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(total - 1)));
  return end + (start - end) * w;
}

template <typename T>
class Adam {
 public:
  explicit Adam(ParameterStore<T>& params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_.all()) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  /// Parameters without a gradient are treated as having a zero gradient.
  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto& all = params_.all();
    for (std::size_t k = 0; k < all.size(); ++k) {
      Tensor<T>& w = all[k].tensor;
      const bool has = w.has_grad();
      for (std::size_t i = 0; i < w.numel(); ++i) {
        const double g = has ? static_cast<double>(w.grad()[i]) : 0.0;
        m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g;
        v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g * g;
        const double mh = m_[k][i] / c1;
        const double vh = v_[k][i] / c2;
        w.data()[i] = static_cast<T>(w.data()[i] - lr * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  ParameterStore<T>& params_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace mvgsr::ad

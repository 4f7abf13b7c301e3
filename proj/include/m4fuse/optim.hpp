#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "m4fuse/autodiff.hpp"
#include "m4fuse/errors.hpp"

namespace m4fuse {

/// lr(t) = min + (base - min) (1 + cos(pi t / T)) / 2, held at min past T.
struct CosineSchedule {
  double base_lr = 1e-4;
  double min_lr = 1e-6;
  std::size_t horizon = 1;

  double operator()(std::size_t t) const {
    if (horizon == 0 || t >= horizon) return min_lr;
    const double pi = std::acos(-1.0);
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(pi * static_cast<double>(t) / static_cast<double>(horizon)));
  }
};

/// Adam with decoupled weight decay.
template <class T>
class AdamW {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 1e-5;

  explicit AdamW(std::vector<std::pair<std::string, Var<T>>> params, double wd = 1e-5)
      : weight_decay(wd), params_(std::move(params)) {
    for (const auto& [n, v] : params_) {
      m_.emplace_back(v.value().size(), 0.0);
      v_.emplace_back(v.value().size(), 0.0);
    }
  }

  std::size_t steps() const { return t_; }

  /// One update at learning rate lr. All gradients are validated before any
  /// parameter changes; a parameter without a gradient is treated as having
  /// a zero gradient.
  void step(double lr) {
    for (const auto& [name, v] : params_)
      if (v.has_grad() && !v.grad().all_finite()) throw TrainingError("non-finite gradient in '" + name + "'");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < params_.size(); ++p) {
      Var<T>& var = params_[p].second;
      Tensor<T>& w = var.mutable_value();
      const bool has = var.has_grad();
      auto& m = m_[p];
      auto& s = v_[p];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double g = has ? static_cast<double>(var.grad()[i]) : 0.0;
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        s[i] = beta2 * s[i] + (1.0 - beta2) * g * g;
        double x = static_cast<double>(w[i]);
        x -= lr * weight_decay * x;
        x -= lr * (m[i] / bc1) / (std::sqrt(s[i] / bc2) + eps);
        w[i] = static_cast<T>(x);
      }
    }
  }

  void zero_grad() {
    for (auto& [n, v] : params_) v.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace m4fuse

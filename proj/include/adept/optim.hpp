#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <variant>
#include <vector>

#include "adept/nn.hpp"

namespace adept {

/// SGD with heavy-ball momentum and L2 weight decay:
///   v <- mu * v + (g + wd * theta);  theta <- theta - lr * v
class SgdMomentum {
 public:
  SgdMomentum() = default;
  SgdMomentum(nn::ParamList params, double momentum, double weight_decay = 0.0)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    reset_state();
  }

  void reset_state() {
    velocity_.clear();
    for (const auto& p : params_) velocity_.emplace_back(p.tensor.numel(), 0.0);
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// Euclidean norm of all accumulated gradients.
  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_) {
      if (!p.tensor.has_grad()) continue;
      for (double g : p.tensor.grad()) s += g * g;
    }
    return std::sqrt(s);
  }

  /// Parameters that received no gradient since zero_grad() are skipped.
  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& t = params_[i].tensor;
      if (!t.has_grad()) continue;
      auto theta = t.data();
      auto g = t.grad();
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < theta.size(); ++j) {
        v[j] = momentum_ * v[j] + (g[j] + weight_decay_ * theta[j]);
        theta[j] -= lr * v[j];
      }
    }
  }

  const nn::ParamList& params() const { return params_; }

 private:
  nn::ParamList params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_ = 0.9;
  double weight_decay_ = 0.0;
};

/// Adam with decoupled weight decay (AdamW).
class AdamW {
 public:
  AdamW() = default;
  AdamW(nn::ParamList params, double beta1 = 0.9, double beta2 = 0.999, double weight_decay = 0.0, double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {
    reset_state();
  }

  void reset_state() {
    m_.clear();
    v_.clear();
    steps_.clear();
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
      steps_.push_back(0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_) {
      if (!p.tensor.has_grad()) continue;
      for (double g : p.tensor.grad()) s += g * g;
    }
    return std::sqrt(s);
  }

  /// Parameters without a gradient are skipped, including their step count.
  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& t = params_[i].tensor;
      if (!t.has_grad()) continue;
      const double n = static_cast<double>(++steps_[i]);
      const double c1 = 1.0 - std::pow(beta1_, n), c2 = 1.0 - std::pow(beta2_, n);
      auto theta = t.data();
      auto g = t.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < theta.size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        theta[j] -= lr * ((m[j] / c1) / (std::sqrt(v[j] / c2) + eps_) + weight_decay_ * theta[j]);
      }
    }
  }

  const nn::ParamList& params() const { return params_; }

 private:
  nn::ParamList params_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<std::size_t> steps_;
  double beta1_ = 0.9, beta2_ = 0.999, weight_decay_ = 0.0, eps_ = 1e-8;
};

/// Either optimizer behind one interface.
class Optimizer {
 public:
  Optimizer() = default;
  template <class Impl>
  explicit Optimizer(Impl impl) : impl_(std::move(impl)) {}

  void reset_state() { std::visit([](auto& o) { o.reset_state(); }, impl_); }
  void zero_grad() { std::visit([](auto& o) { o.zero_grad(); }, impl_); }
  double grad_norm() const { return std::visit([](const auto& o) { return o.grad_norm(); }, impl_); }
  void step(double lr) { std::visit([lr](auto& o) { o.step(lr); }, impl_); }

 private:
  std::variant<SgdMomentum, AdamW> impl_;
};

/// Half-cosine decay from base_lr at step 0 to 0 at total_steps.
struct CosineSchedule {
  double base_lr = 0.05;
  std::size_t total_steps = 1;

  double operator()(std::size_t step) const {
    if (total_steps == 0) return base_lr;
    const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * t));
  }
};

}  // namespace adept

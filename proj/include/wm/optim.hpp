#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "wm/tensor.hpp"

namespace wm {

// Decoupled-weight-decay Adam with bias correction. Moment buffers mirror
// the parameter list they were created for; step_count advances by exactly
// one per step().
template <typename T>
struct AdamWStateT {
  int64_t step_count = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  using Ptr = std::shared_ptr<TensorT<T>>;

  static AdamWStateT init(const std::vector<Ptr>& params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                          double eps = 1e-8, double weight_decay = 0.0) {
    if (lr <= 0.0) throw std::invalid_argument("adamw: lr must be > 0");
    AdamWStateT s;
    s.lr = lr;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    s.weight_decay = weight_decay;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& p : params) {
      s.m.emplace_back(p->data.size(), T(0));
      s.v.emplace_back(p->data.size(), T(0));
    }
    return s;
  }

  // Applies one update using each parameter's grad buffer. lr_scale lets a
  // schedule modulate the base lr without touching the state.
  void step(const std::vector<Ptr>& params, double lr_scale = 1.0) {
    if (params.size() != m.size()) throw std::invalid_argument("adamw: parameter set does not match state");
    for (const auto& p : params) {
      if (!p->requires_grad) throw std::invalid_argument("adamw: parameter without grad buffer");
      for (T g : p->grad)
        if (!std::isfinite(static_cast<double>(g)))
          throw std::runtime_error("adamw: non-finite gradient, step rejected");
    }
    step_count += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    const double alpha = lr * lr_scale;
    for (size_t pi = 0; pi < params.size(); ++pi) {
      auto& p = *params[pi];
      auto& mi = m[pi];
      auto& vi = v[pi];
      if (mi.size() != p.data.size()) throw std::invalid_argument("adamw: shape mismatch with state");
      const int64_t n = p.numel();
#pragma omp parallel for schedule(static) if (n > 65536)
      for (int64_t i = 0; i < n; ++i) {
        const double g = static_cast<double>(p.grad[i]);
        const double m_new = beta1 * static_cast<double>(mi[i]) + (1.0 - beta1) * g;
        const double v_new = beta2 * static_cast<double>(vi[i]) + (1.0 - beta2) * g * g;
        mi[i] = static_cast<T>(m_new);
        vi[i] = static_cast<T>(v_new);
        const double m_hat = m_new / bc1;
        const double v_hat = v_new / bc2;
        double upd = alpha * m_hat / (std::sqrt(v_hat) + eps);
        upd += alpha * weight_decay * static_cast<double>(p.data[i]);
        p.data[i] = static_cast<T>(static_cast<double>(p.data[i]) - upd);
      }
    }
  }
};

using AdamWState = AdamWStateT<float>;

// Global L2-norm gradient clipping. Returns the pre-clip norm; scales all
// grads by max_norm/norm only when the norm exceeds max_norm.
template <typename T>
double clip_grad_norm(const std::vector<std::shared_ptr<TensorT<T>>>& params, double max_norm) {
  if (max_norm <= 0.0) throw std::invalid_argument("clip_grad_norm: max_norm must be > 0");
  double sq = 0.0;
  for (const auto& p : params)
    for (T g : p->grad) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (const auto& p : params)
      for (auto& g : p->grad) g *= s;
  }
  return norm;
}

}  // namespace wm

#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmfuse/tensor.hpp"

namespace mmfuse {

// lr(t) = base*t/t_warm while t < t_warm, then cosine decay to zero at
// t_total. Steps are zero-based, so the first warmup step runs at lr 0.
template <typename T>
T cosine_warmup_lr(int64_t t, int64_t t_total, int64_t t_warm, T base) {
  if (t_total <= 0 || t < 0) throw std::invalid_argument("cosine_warmup_lr: bad step counts");
  if (t_warm > 0 && t < t_warm) return base * T(t) / T(t_warm);
  if (t_total == t_warm) return base;
  double frac = double(t - t_warm) / double(t_total - t_warm);
  return base * T(0.5 * (1.0 + std::cos(std::numbers::pi * frac)));
}

// Adam with decoupled weight decay. Parameters keep registration order; each
// slot carries a fixed lr multiplier (layer-wise decay) and a decay flag
// (norm gains, biases, and other 1-D state stay unregularized).
template <typename T>
class AdamW {
 public:
  struct Slot {
    std::string name;
    Tensor<T> param;
    T lr_scale;
    bool decay;
    std::vector<T> m, v;
  };

  AdamW(T beta1, T beta2, T eps, T weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void add(std::string name, Tensor<T> param, T lr_scale = T(1), bool decay = true) {
    Slot s{std::move(name), std::move(param), lr_scale, decay, {}, {}};
    s.m.assign(size_t(s.param.numel()), T(0));
    s.v.assign(size_t(s.param.numel()), T(0));
    slots_.push_back(std::move(s));
  }

  // One update from the gradients currently held by the parameters. A missing
  // gradient buffer counts as all zeros; weight decay still applies then.
  void step(T lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(double(beta1_), double(t_));
    double bc2 = 1.0 - std::pow(double(beta2_), double(t_));
    for (Slot& s : slots_) {
      T lr_eff = lr * s.lr_scale;
      T* p = s.param.data();
      const T* g = s.param.has_grad() ? s.param.grad_data() : nullptr;
      int64_t n = s.param.numel();
      for (int64_t i = 0; i < n; ++i) {
        T gi = g ? g[i] : T(0);
        s.m[size_t(i)] = beta1_ * s.m[size_t(i)] + (T(1) - beta1_) * gi;
        s.v[size_t(i)] = beta2_ * s.v[size_t(i)] + (T(1) - beta2_) * gi * gi;
        T mhat = T(double(s.m[size_t(i)]) / bc1);
        T vhat = T(double(s.v[size_t(i)]) / bc2);
        T upd = mhat / (std::sqrt(vhat) + eps_);
        if (s.decay) upd += weight_decay_ * p[i];
        p[i] -= lr_eff * upd;
      }
    }
  }

  void zero_grad() {
    for (Slot& s : slots_) s.param.zero_grad();
  }

  int64_t step_count() const { return t_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  T beta1_, beta2_, eps_, weight_decay_;
  int64_t t_ = 0;
  std::vector<Slot> slots_;
};

}  // namespace mmfuse

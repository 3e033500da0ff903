#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "dgl/tensor.hpp"

namespace dgl {

template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> momentum_buffer;

  Parameter() = default;
  explicit Parameter(Tensor<T> v)
      : value(std::move(v)), grad(value.shape()), momentum_buffer(value.shape()) {}

  void zero_grad() { grad.zero(); }
};

struct SgdOptions {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// One SGD step over a parameter set.
///
/// Plain mode (momentum == 0 and weight_decay == 0) is exactly
/// `value -= lr * grad`. Otherwise weight decay is folded into the gradient
/// before the momentum buffer: `buf = momentum * buf + (grad + wd * value)`,
/// `value -= lr * buf`.
template <typename T>
void sgd_step(std::span<Parameter<T>* const> params, const SgdOptions& opt) {
  if (!(opt.lr > 0.0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
  const T lr = static_cast<T>(opt.lr);
  const bool plain = opt.momentum == 0.0 && opt.weight_decay == 0.0;
  const T mom = static_cast<T>(opt.momentum);
  const T wd = static_cast<T>(opt.weight_decay);
  for (Parameter<T>* p : params) {
    auto v = p->value.values();
    auto g = p->grad.values();
    if (plain) {
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
      continue;
    }
    auto b = p->momentum_buffer.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      b[i] = mom * b[i] + (g[i] + wd * v[i]);
      v[i] -= lr * b[i];
    }
  }
}

template <typename T>
void sgd_step(const std::vector<Parameter<T>*>& params, const SgdOptions& opt) {
  sgd_step<T>(std::span<Parameter<T>* const>(params.data(), params.size()), opt);
}

/// Sum of squared gradient entries across a parameter set.
template <typename T>
double grad_norm_sq(const std::vector<Parameter<T>*>& params) {
  double s = 0.0;
  for (const auto* p : params)
    for (T g : p->grad.values()) s += static_cast<double>(g) * static_cast<double>(g);
  return s;
}

/// Step decay: base_rate * decay_factor^floor(epoch / decay_period).
class LrSchedule {
 public:
  LrSchedule(double base_rate = 0.1, double decay_factor = 0.2, int decay_period = 15)
      : base_rate_(base_rate), decay_factor_(decay_factor), decay_period_(decay_period) {
    if (!(base_rate > 0.0)) throw std::invalid_argument("LrSchedule: base_rate must be positive");
    if (!(decay_factor > 0.0 && decay_factor <= 1.0))
      throw std::invalid_argument("LrSchedule: decay_factor must lie in (0, 1]");
    if (decay_period <= 0) throw std::invalid_argument("LrSchedule: decay_period must be positive");
  }

  double rate(long epoch) const {
    return base_rate_ * std::pow(decay_factor_, static_cast<double>(epoch / decay_period_));
  }

  double base_rate() const { return base_rate_; }
  double decay_factor() const { return decay_factor_; }
  int decay_period() const { return decay_period_; }

 private:
  double base_rate_;
  double decay_factor_;
  int decay_period_;
};

}  // namespace dgl

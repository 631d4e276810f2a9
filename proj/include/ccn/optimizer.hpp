#pragma once

#include <cmath>
#include <span>
#include <unordered_map>

#include "ccn/autodiff.hpp"

namespace ccn {

/// AdaGrad: G += g^2; theta -= lr * g / (sqrt(G) + eps).
inline void adagrad_update(std::span<double> params, std::span<const double> grads,
                           std::span<double> accum, double lr, double eps = 1e-8) {
  if (params.size() != grads.size() || params.size() != accum.size()) {
    throw ShapeError("adagrad: params/grads/accumulator sizes differ (" +
                     std::to_string(params.size()) + ", " + std::to_string(grads.size()) +
                     ", " + std::to_string(accum.size()) + ")");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    accum[i] += g * g;
    params[i] -= lr * g / (std::sqrt(accum[i]) + eps);
  }
}

class AdaGrad {
 public:
  explicit AdaGrad(double learning_rate, double epsilon = 1e-8)
      : lr_(learning_rate), eps_(epsilon) {
    if (!(learning_rate > 0.0)) throw Error("adagrad: learning rate must be positive");
    if (!(epsilon > 0.0)) throw Error("adagrad: epsilon must be positive");
  }

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  double epsilon() const { return eps_; }

  /// Accumulator for `p`, allocated (zeros) on first use.
  Tensor& accumulator(const Parameter& p) {
    auto [it, inserted] = accum_.try_emplace(&p);
    if (inserted) it->second = Tensor(p.value.rows, p.value.cols);
    return it->second;
  }

  const Tensor* find_accumulator(const Parameter& p) const {
    auto it = accum_.find(&p);
    return it == accum_.end() ? nullptr : &it->second;
  }

  /// Applies one step to every parameter in `params` that has a gradient.
  /// Sparse gradients update only their rows; untouched rows would see
  /// g = 0, which leaves both theta and G unchanged.
  void step(std::span<Parameter* const> params, const ParamGrads& grads) {
    for (Parameter* param : params) {
      const ParamGrad* found = grads.find(param);
      if (found == nullptr) continue;
      const ParamGrad& pg = *found;
      Parameter& p = *param;
      Tensor& acc = accumulator(p);
      if (pg.dense) {
        adagrad_update(p.value.data, pg.full.data, acc.data, lr_, eps_);
      } else {
        for (const auto& [r, g] : pg.rows) {
          adagrad_update(p.value.row(r), g, acc.row(r), lr_, eps_);
        }
      }
    }
  }

 private:
  double lr_;
  double eps_;
  std::unordered_map<const Parameter*, Tensor> accum_;
};

}  // namespace ccn

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "serpent/params.hpp"

namespace serpent {

struct AdamOptions {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction and decoupled weight decay
/// (theta -= lr * wd * theta before the moment update is applied).
template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  /// Parameters without a gradient are treated as having a zero gradient.
  void step() {
    for (const auto& p : params_)
      if (p.tensor.has_grad())
        for (T g : p.tensor.grad())
          if (!std::isfinite(static_cast<double>(g))) throw NumericalError("non-finite gradient in parameter " + p.name);
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k].tensor;
      auto theta = p.mutable_data();
      const bool has = p.has_grad();
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = has ? static_cast<double>(p.grad()[i]) : 0.0;
        double th = static_cast<double>(theta[i]);
        th -= opts_.lr * opts_.weight_decay * th;
        m_[k][i] = opts_.beta1 * m_[k][i] + (1.0 - opts_.beta1) * g;
        v_[k][i] = opts_.beta2 * v_[k][i] + (1.0 - opts_.beta2) * g * g;
        th -= opts_.lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + opts_.eps);
        theta[i] = static_cast<T>(th);
      }
    }
  }

  void zero_grad() { zero_grads(params_); }
  long steps() const { return t_; }
  const ParamList<T>& params() const { return params_; }

 private:
  ParamList<T> params_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace serpent

#pragma once

// SGD with momentum and a cosine learning-rate schedule:
// lr(t) = base_lr * 0.5 * (1 + cos(pi * t / total_steps)).

#include <cmath>
#include <vector>

#include "dcsod/graph.hpp"

namespace dcsod {

template <class S>
class Sgd {
 public:
  Sgd(double base_lr, double momentum, int total_steps)
      : base_lr_(base_lr), momentum_(momentum), total_steps_(total_steps) {
    if (total_steps <= 0) throw config_error("optimizer needs total_steps > 0");
    if (base_lr <= 0) throw config_error("optimizer needs base_lr > 0");
    if (momentum < 0 || momentum >= 1) throw config_error("momentum must be in [0,1)");
  }

  double lr() const {
    return base_lr_ * 0.5 * (1.0 + std::cos(3.14159265358979323846 * double(step_) /
                                            double(total_steps_)));
  }

  int step_count() const { return step_; }
  int total_steps() const { return total_steps_; }

  void step(std::vector<Param<S>>& params) {
    if (step_ >= total_steps_) throw config_error("optimizer stepped beyond total_steps");
    if (velocity_.empty()) {
      velocity_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i)
        velocity_[i].assign(params[i].value.v.size(), S(0));
    }
    const S rate = S(lr());
    const S mu = S(momentum_);
    for (size_t i = 0; i < params.size(); ++i) {
      Param<S>& p = params[i];
      std::vector<S>& v = velocity_[i];
      for (size_t j = 0; j < v.size(); ++j) {
        v[j] = mu * v[j] + p.grad.v[j];
        p.value.v[j] -= rate * v[j];
      }
    }
    ++step_;
  }

 private:
  double base_lr_, momentum_;
  int total_steps_;
  int step_ = 0;
  std::vector<std::vector<S>> velocity_;
};

}  // namespace dcsod

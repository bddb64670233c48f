#pragma once

// Central-difference verification for tape gradients.

#include <vector>

#include "resvox/ops.hpp"

namespace resvox {

// f builds a scalar loss from the given inputs (captured by the caller).
// Every coordinate of every input gets perturbed by +-eps; returns the worst
// relative disagreement |analytic - central| / max(1, |central|).
template <class F>
double grad_check(F&& f, std::vector<Tensor> inputs, double eps = 1e-5) {
  require(eps >= 1e-6 && eps <= 1e-4,
          "grad_check: eps must lie in [1e-6, 1e-4], got ", eps);
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    Tensor loss = f();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (Tensor& t : inputs) analytic.push_back(t.grad());

  double worst = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    Tensor& t = inputs[i];
    for (long j = 0; j < t.size(); ++j) {
      double orig = t.data()[j];
      t.data()[j] = orig + eps;
      double up = f().item();
      t.data()[j] = orig - eps;
      double down = f().item();
      t.data()[j] = orig;
      double central = (up - down) / (2.0 * eps);
      double rel = std::fabs(analytic[i][size_t(j)] - central) /
                   std::max(1.0, std::fabs(central));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace resvox

#pragma once

// Central-difference gradient checking oracle. The scalar readout is
// loss = sum(G * logits) for a fixed random cotangent G, so the check covers
// the full vector-Jacobian product of every parameter in the network.

#include <cmath>
#include <string>

#include "dcsod/graph.hpp"

namespace testsupport {

inline double rel_err(double a, double b) {
  const double denom = std::max(std::max(std::fabs(a), std::fabs(b)), 1e-6);
  return std::fabs(a - b) / denom;
}

struct GradCheckResult {
  double max_rel = 0.0;
  double analytic = 0.0, fd = 0.0;
  std::string where;
};

inline GradCheckResult gradcheck_params(dcsod::Network<double>& net,
                                        const dcsod::Tensor<double>& input, uint64_t seed,
                                        double h = 1e-3) {
  dcsod::Workspace<double> ws;
  auto first = net.forward(input, ws);
  dcsod::Tensor<double> g(first.logits->shape);
  dcsod::Rng rng(seed);
  for (auto& x : g.v) x = rng.normal();

  net.zero_grads();
  net.forward(input, ws);
  net.backward(g, ws);
  std::vector<std::vector<double>> analytic;
  for (const auto& p : net.params()) analytic.push_back(p.grad.v);

  auto loss = [&]() {
    dcsod::Workspace<double> w2;
    auto out = net.forward(input, w2);
    double s = 0;
    for (size_t i = 0; i < g.v.size(); ++i) s += g.v[i] * out.logits->v[i];
    return s;
  };

  GradCheckResult r;
  auto& params = net.params();
  for (size_t pi = 0; pi < params.size(); ++pi) {
    for (size_t j = 0; j < params[pi].value.v.size(); ++j) {
      double& x = params[pi].value.v[j];
      const double saved = x;
      x = saved + h;
      const double lp = loss();
      x = saved - h;
      const double lm = loss();
      x = saved;
      const double fd = (lp - lm) / (2.0 * h);
      // The 1e-3 floor keeps exactly-zero gradients (for instance a scale
      // parameter feeding a normalization, which is scale-invariant) from
      // amplifying finite-difference roundoff noise into false alarms.
      const double e = std::fabs(analytic[pi][j] - fd) /
                       std::max({std::fabs(analytic[pi][j]), std::fabs(fd), 1e-3});
      if (e > r.max_rel) {
        r.max_rel = e;
        r.analytic = analytic[pi][j];
        r.fd = fd;
        r.where = params[pi].name + "[" + std::to_string(j) + "]";
      }
    }
  }
  return r;
}

inline dcsod::Tensor<double> random_input(std::vector<int> shape, dcsod::Rng& rng) {
  dcsod::Tensor<double> t(std::move(shape));
  for (auto& x : t.v) x = rng.normal();
  return t;
}

}  // namespace testsupport

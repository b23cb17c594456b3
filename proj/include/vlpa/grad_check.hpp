#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "vlpa/autodiff.hpp"

namespace vlpa {

struct GradCheckReport {
  // Max over leaves of |autodiff - fd|_inf / max(|fd|_inf, 1e-8).
  double max_rel_error = 0.0;
  std::vector<double> per_leaf;
  bool passed = false;
};

using GraphBuilder = std::function<Var(Tape&, std::span<const Var> leaves)>;

// Compares reverse-mode gradients against central finite differences.
inline GradCheckReport grad_check(const GraphBuilder& build, std::vector<Tensor> leaves,
                                  double tolerance, double h = 1e-5) {
  auto evaluate = [&](std::vector<Tensor>& ls, bool with_grad, std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<Var> vars;
    for (auto& l : ls) vars.push_back(tape.leaf(l, with_grad));
    Var loss = build(tape, vars);
    if (with_grad) {
      tape.backward(loss);
      for (auto& v : vars) grads->push_back(v.grad_tensor());
    }
    return loss.item();
  };

  std::vector<Tensor> analytic;
  evaluate(leaves, true, &analytic);

  GradCheckReport report;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    double err = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < leaves[li].size(); ++i) {
      const double x0 = leaves[li][i];
      leaves[li][i] = x0 + h;
      const double fp = evaluate(leaves, false, nullptr);
      leaves[li][i] = x0 - h;
      const double fm = evaluate(leaves, false, nullptr);
      leaves[li][i] = x0;
      const double fd = (fp - fm) / (2.0 * h);
      err = std::max(err, std::abs(analytic[li][i] - fd));
      scale = std::max(scale, std::abs(fd));
    }
    const double rel = err / std::max(scale, 1e-8);
    report.per_leaf.push_back(rel);
    report.max_rel_error = std::max(report.max_rel_error, rel);
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace vlpa

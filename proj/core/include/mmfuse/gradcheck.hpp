#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mmfuse/tape.hpp"
#include "mmfuse/tensor.hpp"

namespace mmfuse {

struct GradCheckResult {
  double max_rel_err = 0;
  std::string worst;
  bool pass(double tol) const { return max_rel_err <= tol; }
};

// Compares tape gradients against central differences. loss_fn must rebuild
// the forward pass from the leaves on every call so that perturbed values are
// observed; any randomness inside it has to come from streams re-derived from
// fixed seeds, not from shared mutable state.
inline GradCheckResult grad_check(const std::vector<Tensor<double>>& leaves,
                                  const std::function<Tensor<double>(Tape<double>&)>& loss_fn,
                                  double step = 1e-5) {
  for (const auto& leaf : leaves) leaf.set_requires_grad(true);

  Tape<double> tape;
  Tensor<double> loss = loss_fn(tape);
  for (const auto& leaf : leaves) leaf.zero_grad();
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& leaf : leaves) analytic.push_back(leaf.grad_vector());

  auto eval = [&]() {
    Tape<double> t;
    NoGradGuard<double> guard(t);
    return loss_fn(t).item();
  };

  GradCheckResult res;
  for (size_t li = 0; li < leaves.size(); ++li) {
    double* v = leaves[li].data();
    for (int64_t i = 0; i < leaves[li].numel(); ++i) {
      double saved = v[i];
      v[i] = saved + step;
      double up = eval();
      v[i] = saved - step;
      double down = eval();
      v[i] = saved;
      double numeric = (up - down) / (2 * step);
      double a = analytic[li][size_t(i)];
      double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 0.01});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "leaf " + std::to_string(li) + " elem " + std::to_string(i) +
                    ": analytic " + std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return res;
}

}  // namespace mmfuse

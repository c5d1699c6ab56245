#pragma once

#include <functional>

#include "knet/tensor.hpp"

namespace knet {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;
};

// Compares the backward() gradient of scalar f with respect to x against
// fourth-order central differences, perturbing x in place. Relative error uses
// max(|analytic|, |numeric|, 1e-3 * max|analytic over x|, 1e-8) as
// denominator, so components far below the tensor's gradient scale are measured
// against the difference noise floor rather than their own size. Requires kF64 mode.
GradCheckResult grad_check_detailed(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                    double eps = 1e-6);

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps = 1e-6);

}  // namespace knet

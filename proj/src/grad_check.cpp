#include "knet/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace knet {

GradCheckResult grad_check_detailed(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                    double eps) {
  if (precision() != Precision::kF64) throw ContractError("grad_check requires f64 mode");
  if (!x.is_leaf()) throw ContractError("grad_check perturbs a leaf tensor");
  const bool saved_flag = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  graph::clear();
  Tensor y = f(x);
  if (y.numel() != 1)
    throw ContractError("grad_check needs a scalar function, got " + shape_str(y.shape()));
  y.backward();
  std::vector<double> analytic(x.numel(), 0.0);
  if (x.has_grad()) {
    auto g = x.grad();
    std::copy(g.begin(), g.end(), analytic.begin());
  }

  double scale = 0.0;
  for (double a : analytic) scale = std::max(scale, std::abs(a));
  GradCheckResult res;
  auto xs = x.mutable_data();
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double orig = xs[i];
    auto at = [&](double offset) {
      xs[i] = orig + offset;
      return f(x).item();
    };
    const double fp2 = at(2 * eps), fp = at(eps), fm = at(-eps), fm2 = at(-2 * eps);
    xs[i] = orig;
    const double numeric = (fm2 - 8.0 * fm + 8.0 * fp - fp2) / (12.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3 * scale, 1e-8});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (rel > res.max_rel_error || i == 0) {
      res.max_rel_error = std::max(res.max_rel_error, rel);
      if (rel >= res.max_rel_error) {
        res.worst_index = i;
        res.analytic = analytic[i];
        res.numeric = numeric;
      }
    }
  }
  x.zero_grad();
  x.set_requires_grad(saved_flag);
  return res;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps) {
  return grad_check_detailed(f, std::move(x), eps).max_rel_error;
}

}  // namespace knet

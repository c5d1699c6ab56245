#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "knet/grad_check.hpp"
#include "knet/grad_suite.hpp"
#include "knet/nn.hpp"
#include "knet/tensor.hpp"

namespace knet::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Fixed random weights turn any tensor into a scalar with O(1) gradients.
inline std::vector<double> random_weights(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.5, 1.5);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng) * (rng() % 2 ? 1.0 : -1.0);
  return v;
}

inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  return sum_all(mul(y, Tensor(y.shape(), random_weights(y.numel(), seed))));
}

inline void set_identity(nn::Linear& l) {
  auto w = l.weight.mutable_data();
  const std::size_t n = l.in_features();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = (i / n == i % n) ? 1.0 : 0.0;
  for (auto& b : l.bias.mutable_data()) b = 0.0;
}

using GradReport = gradsuite::ParameterReport;

// Gradient check of the input and of every parameter; reports the worst one.
inline GradReport grad_check_all(const nn::ParameterList& params, Tensor input,
                                 const std::function<Tensor(const Tensor&)>& forward,
                                 std::uint64_t seed, double eps = 1e-5) {
  return gradsuite::check_parameters(params, input, forward, seed, eps);
}

}  // namespace knet::testing

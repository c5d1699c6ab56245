#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "knet/nn.hpp"

// Finite-difference checks of every trainable layer, run in f64.
namespace knet::gradsuite {

struct ParameterReport {
  double max_error = 0.0;
  std::string worst;
  double analytic = 0.0, numeric = 0.0;
};

// Checks d(sum(w * forward(input)))/d(input and each parameter) with fixed
// random weights w drawn from seed. Attention key biases are checked for an
// exactly zero gradient instead.
ParameterReport check_parameters(const nn::ParameterList& params, const Tensor& input,
                                 const std::function<Tensor(const Tensor&)>& forward, std::uint64_t seed,
                                 double eps = 1e-5);

struct CaseResult {
  std::string component;
  std::uint64_t seed = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::string worst;
  bool passed() const { return max_error < tolerance; }
};

// Layers, then the composed pieces (full stage, backbone).
std::vector<std::string> components();
// Tolerance 1e-5 for single layers, 1e-4 for composed checks.
double tolerance_of(const std::string& component);

std::vector<CaseResult> run(const std::vector<std::string>& components, std::size_t seeds);

}  // namespace knet::gradsuite

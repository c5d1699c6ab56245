#include "knet/grad_suite.hpp"

#include <algorithm>
#include <cmath>

#include "knet/grad_check.hpp"
#include "knet/kernel_head.hpp"
#include "knet/pipeline.hpp"

namespace knet::gradsuite {

namespace {

Tensor random_input(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.5, 1.5);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = dist(rng) * (rng() % 2 ? 1.0 : -1.0);
  return sum_all(mul(y, Tensor(y.shape(), std::move(w))));
}

head::HeadConfig small_head(bool aku) {
  head::HeadConfig cfg;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.ffn_multiplier = 2;
  cfg.num_classes = 2;
  cfg.adaptive_update = aku;
  return cfg;
}

CaseResult run_case(const std::string& name, std::uint64_t seed) {
  nn::Rng rng(seed);
  std::mt19937_64 data(1000 + seed);
  nn::ParameterList ps;
  Tensor input;
  std::function<Tensor(const Tensor&)> fwd;

  if (name == "linear") {
    auto l = std::make_shared<nn::Linear>(5, 3, rng);
    l->collect("linear", ps);
    input = random_input({2, 4, 5}, data, -1, 1);
    fwd = [l](const Tensor& x) { return l->forward(x); };
  } else if (name == "layer_norm") {
    auto l = std::make_shared<nn::LayerNorm>(6);
    l->gamma = random_input({6}, data, -1, 1);
    l->beta = random_input({6}, data, -1, 1);
    l->collect("layer_norm", ps);
    input = random_input({3, 6}, data, -2, 2);
    fwd = [l](const Tensor& x) { return l->forward(x); };
  } else if (name == "fc_ln_relu") {
    auto l = std::make_shared<nn::FcLnRelu>(4, 6, rng);
    l->collect("fc_ln_relu", ps);
    input = random_input({3, 4}, data, -1, 1);
    fwd = [l](const Tensor& x) { return l->forward(x); };
  } else if (name == "conv2d") {
    auto l = std::make_shared<nn::Conv2d>(2, 3, 3, 2, 1, rng);
    l->bias = random_input({3}, data, -1, 1);
    l->collect("conv2d", ps);
    input = random_input({2, 2, 6, 6}, data, -1, 1);
    fwd = [l](const Tensor& x) { return l->forward(x); };
  } else if (name == "attention") {
    auto l = std::make_shared<nn::MultiHeadAttention>(8, 4, rng);
    l->collect("attention", ps);
    input = random_input({2, 3, 8}, data, -1, 1);
    fwd = [l](const Tensor& x) { return l->forward(x, x, x); };
  } else if (name == "feed_forward") {
    auto l = std::make_shared<nn::FeedForward>(4, 16, rng);
    l->norm.gamma = random_input({4}, data, 0.5, 1.5);
    l->collect("feed_forward", ps);
    input = random_input({2, 3, 4}, data, -1, 1);
    fwd = [l](const Tensor& x) { return l->forward(x); };
  } else if (name == "adaptive_update") {
    auto l = std::make_shared<head::AdaptiveKernelUpdate>(6, rng);
    Tensor k = random_input({3, 6}, data, -1, 1);
    ps.emplace_back("prev_kernels", k);
    l->collect("adaptive_update", ps);
    input = random_input({2, 3, 6}, data, -1, 1);
    fwd = [l, k](const Tensor& fk) { return l->forward(fk, k); };
  } else if (name == "plain_update") {
    auto l = std::make_shared<head::PlainKernelUpdate>(6, rng);
    Tensor k = random_input({3, 6}, data, -1, 1);
    ps.emplace_back("prev_kernels", k);
    l->collect("plain_update", ps);
    input = random_input({2, 3, 6}, data, -1, 1);
    fwd = [l, k](const Tensor& fk) { return l->forward(fk, k); };
  } else if (name == "kernel_interaction") {
    auto l = std::make_shared<head::KernelInteraction>(8, 2, 16, rng);
    l->collect("kernel_interaction", ps);
    input = random_input({2, 3, 8}, data, -1, 1);
    fwd = [l](const Tensor& k) { return l->forward(k); };
  } else if (name == "projection_head") {
    auto l = std::make_shared<head::ProjectionHead>(6, 3, rng);
    l->collect("projection_head", ps);
    input = random_input({2, 3, 6}, data, -1, 1);
    fwd = [l](const Tensor& k) { return l->forward(k); };
  } else if (name == "stage" || name == "stage_no_aku") {
    auto l = std::make_shared<head::KernelUpdateStage>(small_head(name == "stage"), rng);
    Tensor masks = random_input({1, 3, 3, 3}, data, -2, 2);
    Tensor k = random_input({3, 8}, data, -1, 1);
    ps.emplace_back("prev_masks", masks);
    ps.emplace_back("prev_kernels", k);
    l->collect("stage", ps);
    input = random_input({1, 8, 3, 3}, data, -1, 1);
    fwd = [l, masks, k](const Tensor& f) {
      auto out = l->run({masks, head::MaskActivation::kSigmoid}, k, f);
      return concat({reshape(out.masks.logits, {1, 27}), reshape(out.class_logits, {1, 6})}, 1);
    };
  } else if (name == "backbone") {
    auto l = std::make_shared<pipeline::BackboneLite>(8, true, true, rng);
    l->collect("backbone", ps);
    input = random_input({1, 3, 8, 8}, data, 0, 1);
    fwd = [l](const Tensor& x) {
      auto f = l->forward(x);
      return concat({reshape(f.instance, {1, 32}), reshape(f.semantic, {1, 32})}, 1);
    };
  } else {
    throw ConfigError("unknown grad-check component '" + name + "'");
  }
  for (auto& [key, p] : ps)
    if (!p.requires_grad()) p.set_requires_grad(true);
  const auto r = check_parameters(ps, input, fwd, seed);
  return CaseResult{name, seed, r.max_error, tolerance_of(name), r.worst};
}

}  // namespace

ParameterReport check_parameters(const nn::ParameterList& params, const Tensor& input,
                                 const std::function<Tensor(const Tensor&)>& forward, std::uint64_t seed,
                                 double eps) {
  auto loss = [&](const Tensor&) { return weighted_sum(forward(input), seed); };
  ParameterReport r;
  auto note = [&](const GradCheckResult& e, const std::string& key) {
    if (e.max_rel_error > r.max_error || r.worst.empty()) {
      r.max_error = std::max(r.max_error, e.max_rel_error);
      r.worst = key;
      r.analytic = e.analytic;
      r.numeric = e.numeric;
    }
  };
  note(grad_check_detailed(loss, input, eps), "input");
  for (const auto& [key, p] : params) {
    if (key.ends_with(".k.bias")) {
      // Softmax is shift invariant per query, so the key bias has an exactly
      // zero gradient; relative error would only measure difference noise.
      Tensor bias = p;
      bias.zero_grad();
      loss(input).backward();
      double worst = 0.0;
      for (double g : bias.grad()) worst = std::max(worst, std::abs(g));
      bias.zero_grad();
      note(GradCheckResult{worst < 1e-12 ? 0.0 : 1.0, 0, worst, 0.0}, key);
      continue;
    }
    note(grad_check_detailed(loss, p, eps), key);
  }
  return r;
}

std::vector<std::string> components() {
  return {"linear",       "layer_norm",         "fc_ln_relu",      "conv2d", "attention",
          "feed_forward", "adaptive_update",    "plain_update",    "kernel_interaction",
          "projection_head", "stage",           "stage_no_aku",    "backbone"};
}

double tolerance_of(const std::string& component) {
  if (component == "stage" || component == "stage_no_aku" || component == "backbone") return 1e-4;
  return 1e-5;
}

std::vector<CaseResult> run(const std::vector<std::string>& names, std::size_t seeds) {
  PrecisionScope f64(Precision::kF64);
  std::vector<CaseResult> out;
  for (const auto& name : names)
    for (std::uint64_t seed = 0; seed < seeds; ++seed) out.push_back(run_case(name, seed));
  return out;
}

}  // namespace knet::gradsuite

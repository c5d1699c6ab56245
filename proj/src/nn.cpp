#include "knet/nn.hpp"

#include <cmath>
#include <numbers>

namespace knet::nn {

Tensor uniform_parameter(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

Linear::Linear(std::size_t in_features, std::size_t out_features, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  weight = uniform_parameter({out_features, in_features}, bound, rng);
  bias = uniform_parameter({out_features}, bound, rng);
}

Tensor Linear::forward(const Tensor& x) const {
  if (x.shape().back() != in_features())
    throw DimensionError("linear layer expects last axis " + std::to_string(in_features()) +
                         ", got " + shape_str(x.shape()));
  return add(matmul(x, transpose(weight)), bias);
}

void Linear::collect(const std::string& prefix, ParameterList& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(std::size_t channels)
    : gamma(Shape{channels}, 1.0, true), beta(Shape{channels}, 0.0, true) {}

Tensor LayerNorm::forward(const Tensor& x) const {
  if (!enabled) return x;
  if (x.shape().back() < 2)
    throw ContractError("layer norm over a single channel is degenerate");
  return knet::layer_norm(x, gamma, beta, eps);
}

void LayerNorm::collect(const std::string& prefix, ParameterList& out) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

void FcLnRelu::collect(const std::string& prefix, ParameterList& out) const {
  fc.collect(prefix + ".fc", out);
  norm.collect(prefix + ".ln", out);
}

MultiHeadAttention::MultiHeadAttention(std::size_t width, std::size_t heads_, Rng& rng)
    : heads(heads_) {
  if (heads == 0 || width % heads != 0)
    throw ConfigError("attention width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads_) + " heads");
  q_proj = Linear(width, width, rng);
  k_proj = Linear(width, width, rng);
  v_proj = Linear(width, width, rng);
  out_proj = Linear(width, width, rng);
}

Tensor MultiHeadAttention::forward(const Tensor& q, const Tensor& k, const Tensor& v,
                                   Tensor* weights) const {
  if (q.dim() != 3 || k.dim() != 3 || v.dim() != 3)
    throw DimensionError("attention expects [B, N, C] inputs, got " + shape_str(q.shape()));
  const std::size_t b = q.size(0), nq = q.size(1), nk = k.size(1), c = q.size(2);
  if (c % heads != 0)
    throw ConfigError("attention width " + std::to_string(c) + " not divisible by " +
                      std::to_string(heads) + " heads");
  const std::size_t d = c / heads;
  auto split = [&](const Tensor& x, std::size_t n) {
    return permute(reshape(x, {b, n, heads, d}), {0, 2, 1, 3});  // [B, h, N, d]
  };
  Tensor qh = split(q_proj.forward(q), nq);
  Tensor kh = split(k_proj.forward(k), nk);
  Tensor vh = split(v_proj.forward(v), nk);
  Tensor scores = mul_scalar(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor attn = softmax(scores, 3);
  if (weights) *weights = attn;
  Tensor ctx = reshape(permute(matmul(attn, vh), {0, 2, 1, 3}), {b, nq, c});
  return out_proj.forward(ctx);
}

void MultiHeadAttention::collect(const std::string& prefix, ParameterList& out) const {
  q_proj.collect(prefix + ".q", out);
  k_proj.collect(prefix + ".k", out);
  v_proj.collect(prefix + ".v", out);
  out_proj.collect(prefix + ".out", out);
}

FeedForward::FeedForward(std::size_t width, std::size_t hidden, Rng& rng)
    : fc1(width, hidden, rng), fc2(hidden, width, rng), norm(width) {}

Tensor FeedForward::forward(const Tensor& x) const {
  return norm.forward(add(x, fc2.forward(relu(fc1.forward(x)))));
}

void FeedForward::collect(const std::string& prefix, ParameterList& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
  norm.collect(prefix + ".ln", out);
}

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
               std::size_t stride_, std::size_t padding_, Rng& rng)
    : stride(stride_), padding(padding_) {
  const double fan_in = static_cast<double>(in_channels * kernel * kernel);
  weight = uniform_parameter({out_channels, in_channels, kernel, kernel}, std::sqrt(6.0 / fan_in),
                             rng);
  bias = Tensor(Shape{out_channels}, 0.0, true);
}

Tensor Conv2d::forward(const Tensor& x) const {
  return knet::conv2d(x, weight, bias, stride, padding);
}

void Conv2d::collect(const std::string& prefix, ParameterList& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

Tensor layer_norm(const Tensor& x, const LayerNorm& layer) { return layer.forward(x); }

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const MultiHeadAttention& layer) {
  return layer.forward(q, k, v);
}

Tensor conv2d(const Tensor& x, const Conv2d& layer) { return layer.forward(x); }

Tensor positional_encoding_2d(std::size_t height, std::size_t width, std::size_t channels) {
  if (channels == 0 || channels % 4 != 0)
    throw ConfigError("positional encoding needs channels divisible by 4, got " +
                      std::to_string(channels));
  const std::size_t half = channels / 2;
  const double two_pi = 2.0 * std::numbers::pi;
  std::vector<double> inv_freq(half / 2);
  for (std::size_t j = 0; j < half / 2; ++j)
    inv_freq[j] = 1.0 / std::pow(10000.0, 2.0 * static_cast<double>(j) / static_cast<double>(half));
  std::vector<double> out(channels * height * width);
  auto at = [&](std::size_t c, std::size_t u, std::size_t v) -> double& {
    return out[(c * height + u) * width + v];
  };
  for (std::size_t u = 0; u < height; ++u) {
    const double py = two_pi * static_cast<double>(u) / static_cast<double>(height);
    for (std::size_t v = 0; v < width; ++v) {
      const double px = two_pi * static_cast<double>(v) / static_cast<double>(width);
      for (std::size_t j = 0; j < half / 2; ++j) {
        at(2 * j, u, v) = std::sin(py * inv_freq[j]);
        at(2 * j + 1, u, v) = std::cos(py * inv_freq[j]);
        at(half + 2 * j, u, v) = std::sin(px * inv_freq[j]);
        at(half + 2 * j + 1, u, v) = std::cos(px * inv_freq[j]);
      }
    }
  }
  return Tensor({channels, height, width}, std::move(out));
}

}  // namespace knet::nn

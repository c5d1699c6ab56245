#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "knet/ops.hpp"
#include "knet/tensor.hpp"

namespace knet::nn {

using Rng = std::mt19937_64;

// Parameters in registration order, keyed hierarchically ("head.stage1.psi3.weight").
using ParameterList = std::vector<std::pair<std::string, Tensor>>;

Tensor uniform_parameter(Shape shape, double bound, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features, Rng& rng);

  // x[..., in] -> [..., out]
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;

  std::size_t in_features() const { return weight.size(1); }
  std::size_t out_features() const { return weight.size(0); }

  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t channels);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;

  Tensor gamma, beta;
  double eps = 1e-5;
  // Off = identity; exists so closed-form cases can be checked by hand.
  bool enabled = true;
};

// FC -> LN -> ReLU.
class FcLnRelu {
 public:
  FcLnRelu() = default;
  FcLnRelu(std::size_t in, std::size_t out, Rng& rng) : fc(in, out, rng), norm(out) {}

  Tensor forward(const Tensor& x) const { return relu(norm.forward(fc.forward(x))); }
  void collect(const std::string& prefix, ParameterList& out) const;

  Linear fc;
  LayerNorm norm;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t width, std::size_t heads, Rng& rng);

  // q, k, v: [B, N, C]. When `weights` is given it receives the attention
  // probabilities [B, heads, N_q, N_k].
  Tensor forward(const Tensor& q, const Tensor& k, const Tensor& v,
                 Tensor* weights = nullptr) const;
  void collect(const std::string& prefix, ParameterList& out) const;

  std::size_t heads = 1;
  Linear q_proj, k_proj, v_proj, out_proj;
};

// Residual two-layer MLP followed by LayerNorm: LN(x + W2 relu(W1 x)).
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(std::size_t width, std::size_t hidden, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;

  Linear fc1, fc2;
  LayerNorm norm;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
         std::size_t stride, std::size_t padding, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;

  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]
  std::size_t stride = 1;
  std::size_t padding = 0;
};

Tensor layer_norm(const Tensor& x, const LayerNorm& layer);
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const MultiHeadAttention& layer);
Tensor conv2d(const Tensor& x, const Conv2d& layer);

// Sinusoidal 2-D encoding [C, H, W]. The first C/2 channels encode the row,
// the rest the column; within each half channel 2j is sin(p / T^(2j/(C/2)))
// and 2j+1 the matching cos, with p = 2*pi*index/extent and T = 10000.
Tensor positional_encoding_2d(std::size_t height, std::size_t width, std::size_t channels);

}  // namespace knet::nn

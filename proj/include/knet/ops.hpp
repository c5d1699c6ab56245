#pragma once

#include <cstddef>
#include <vector>

#include "knet/tensor.hpp"

// Differentiable tensor operations. Every op records its backward on the
// current thread's graph when an input requires grad.
namespace knet {

// a[..., m, k] @ b[..., k, n]. Leading (batch) axes must match, or one
// operand may be a plain matrix shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);

// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
// Singleton-axis expansion to `shape` (same rank, or left-padded with 1s).
Tensor broadcast_to(const Tensor& x, const Shape& shape);

enum class BinaryOp { kAdd, kSub, kMul, kDiv };

// Elementwise binary op with singleton-axis broadcasting. Ranks may differ;
// the shorter shape is left-padded with 1s.
Tensor elementwise(const Tensor& a, const Tensor& b, BinaryOp op);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double s);
Tensor mul_scalar(const Tensor& x, double s);
Tensor neg(const Tensor& x);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
// log(1 + e^x), computed stably.
Tensor softplus(const Tensor& x);
// Gradient passes where lo <= x <= hi.
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor pow(const Tensor& x, double exponent);

// Sums over the listed axes. keepdim retains them with extent 1.
Tensor reduce_sum(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim = false);
Tensor reduce_mean(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// Max-subtracted; throws NumericError on non-finite input.
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

// Normalizes over the last axis with population variance, then applies the
// per-channel affine transform.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

// Cross-correlation. x[B, Cin, H, W], weight[Cout, Cin, k, k], bias[Cout]
// (may be undefined). Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);

// x[B, C, h, w] -> [B, C, out_h, out_w], half-pixel centers.
Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator-(double s, const Tensor& a) { return add_scalar(neg(a), s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace knet

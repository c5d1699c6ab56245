#include "knet/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace knet {

namespace {

using detail::Node;
using detail::NodePtr;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Shape left_pad(const Shape& s, std::size_t rank) {
  Shape out(rank - s.size(), 1);
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

// Output shape plus per-operand strides (0 on expanded axes).
struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;
  bool same = false;
};

Broadcast plan_broadcast(const Shape& a_raw, const Shape& b_raw) {
  Broadcast p;
  if (a_raw == b_raw) {
    p.out = a_raw;
    p.same = true;
    return p;
  }
  const std::size_t rank = std::max(a_raw.size(), b_raw.size());
  Shape a = left_pad(a_raw, rank), b = left_pad(b_raw, rank);
  p.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (a[i] == b[i] || b[i] == 1) {
      p.out[i] = a[i];
    } else if (a[i] == 1) {
      p.out[i] = b[i];
    } else {
      throw DimensionError("cannot broadcast shapes " + shape_str(a_raw) + " and " +
                           shape_str(b_raw));
    }
  }
  auto ca = contiguous_strides(a), cb = contiguous_strides(b);
  p.sa.resize(rank);
  p.sb.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    p.sa[i] = (a[i] == 1 && p.out[i] != 1) ? 0 : ca[i];
    p.sb[i] = (b[i] == 1 && p.out[i] != 1) ? 0 : cb[i];
  }
  return p;
}

// Calls f(out_index, a_index, b_index) in row-major output order.
template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t total = shape_numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  const std::size_t rank = p.out.size();
  if (rank == 0) return;
  const std::size_t inner = p.out[rank - 1];
  const std::size_t ia_step = p.sa[rank - 1], ib_step = p.sb[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0, i = 0;
  const std::size_t outer = total / inner;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) f(i++, oa + j * ia_step, ob + j * ib_step);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      oa += p.sa[d];
      ob += p.sb[d];
      if (idx[d] < p.out[d]) break;
      oa -= p.sa[d] * p.out[d];
      ob -= p.sb[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

template <class Fwd, class Bwd>
Tensor unary(const Tensor& x, Fwd fwd, Bwd dfdx) {
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  NodePtr xn = x.node();
  return detail::make_result(x.shape(), std::move(out), {&x}, [xn, dfdx](Node& self) {
    double* gx = detail::grad_target(xn);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      gx[i] += self.grad[i] * dfdx(xn->data[i], self.data[i]);
  });
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

// Splits a shape as [outer, axis, inner] around `axis`.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw DimensionError("axis " + std::to_string(axis) + " invalid for shape " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

// ---------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2 || as[as.size() - 1] != bs[bs.size() - 2])
    throw DimensionError("matmul shape mismatch: " + shape_str(as) + " x " + shape_str(bs));
  const std::size_t m = as[as.size() - 2], k = as.back(), n = bs.back();
  Shape a_batch(as.begin(), as.end() - 2), b_batch(bs.begin(), bs.end() - 2);
  Shape batch;
  if (a_batch == b_batch || b_batch.empty()) {
    batch = a_batch;
  } else if (a_batch.empty()) {
    batch = b_batch;
  } else {
    throw DimensionError("matmul batch mismatch: " + shape_str(as) + " x " + shape_str(bs));
  }
  const std::size_t nb = shape_numel(batch);
  const std::size_t a_step = a_batch.empty() ? 0 : m * k;
  const std::size_t b_step = b_batch.empty() ? 0 : k * n;
  std::vector<double> out(nb * m * n);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  for (std::size_t t = 0; t < nb; ++t) {
    MutMap(out.data() + t * m * n, m, n).noalias() =
        ConstMap(ad + t * a_step, m, k) * ConstMap(bd + t * b_step, k, n);
  }
  Shape os = batch;
  os.push_back(m);
  os.push_back(n);
  NodePtr an = a.node(), bn = b.node();
  return detail::make_result(
      std::move(os), std::move(out), {&a, &b},
      [an, bn, nb, m, k, n, a_step, b_step](Node& self) {
        double* ga = detail::grad_target(an);
        double* gb = detail::grad_target(bn);
        for (std::size_t t = 0; t < nb; ++t) {
          ConstMap dc(self.grad.data() + t * m * n, m, n);
          if (ga)
            MutMap(ga + t * a_step, m, k).noalias() +=
                dc * ConstMap(bn->data.data() + t * b_step, k, n).transpose();
          if (gb)
            MutMap(gb + t * b_step, k, n).noalias() +=
                ConstMap(an->data.data() + t * a_step, m, k).transpose() * dc;
        }
      });
}

// ---------------------------------------------------------------- layout

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const Shape& s = x.shape();
  if (axes.size() != s.size())
    throw DimensionError("permute needs " + std::to_string(s.size()) + " axes for " +
                         shape_str(s));
  std::vector<bool> seen(s.size(), false);
  for (auto a : axes) {
    if (a >= s.size() || seen[a]) throw DimensionError("permute axes are not a permutation");
    seen[a] = true;
  }
  const std::size_t rank = s.size();
  Shape os(rank);
  for (std::size_t i = 0; i < rank; ++i) os[i] = s[axes[i]];
  auto in_strides = contiguous_strides(s);
  std::vector<std::size_t> gather(rank);
  for (std::size_t i = 0; i < rank; ++i) gather[i] = in_strides[axes[i]];
  const std::size_t total = x.numel();
  // src[i] = input offset of output element i.
  auto src = std::make_shared<std::vector<std::size_t>>(total);
  {
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < total; ++i) {
      (*src)[i] = off;
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        off += gather[d];
        if (idx[d] < os[d]) break;
        off -= gather[d] * os[d];
        idx[d] = 0;
      }
    }
  }
  auto xd = x.data();
  std::vector<double> out(total);
  for (std::size_t i = 0; i < total; ++i) out[i] = xd[(*src)[i]];
  NodePtr xn = x.node();
  return detail::make_result(std::move(os), std::move(out), {&x}, [xn, src](Node& self) {
    double* gx = detail::grad_target(xn);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[(*src)[i]] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  const std::size_t r = x.dim();
  if (r < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> axes(r);
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(x, axes);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  NodePtr xn = x.node();
  return detail::make_result(std::move(shape), x.to_vector(), {&x}, [xn](Node& self) {
    double* gx = detail::grad_target(xn);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw DimensionError("concat axis out of range for " + shape_str(s0));
  Shape os = s0;
  os[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok)
      throw DimensionError("concat shape mismatch: " + shape_str(s0) + " vs " + shape_str(s));
    os[axis] += s[axis];
  }
  const AxisSplit out_split = split_axis(os, axis);
  std::vector<double> out(shape_numel(os));
  std::vector<std::size_t> lens, offsets;
  std::size_t acc = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis];
    lens.push_back(len);
    offsets.push_back(acc);
    auto pd = p.data();
    for (std::size_t o = 0; o < out_split.outer; ++o)
      std::copy_n(pd.begin() + o * len * out_split.inner, len * out_split.inner,
                  out.begin() + (o * out_split.len + acc) * out_split.inner);
    acc += len;
  }
  std::vector<NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result(
      std::move(os), std::move(out), parts, [nodes, lens, offsets, out_split](Node& self) {
        for (std::size_t t = 0; t < nodes.size(); ++t) {
          double* g = detail::grad_target(nodes[t]);
          if (!g) continue;
          const std::size_t chunk = lens[t] * out_split.inner;
          for (std::size_t o = 0; o < out_split.outer; ++o) {
            const double* src =
                self.grad.data() + (o * out_split.len + offsets[t]) * out_split.inner;
            double* dst = g + o * chunk;
            for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
          }
        }
      });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  const AxisSplit sp = split_axis(s, axis);
  if (length == 0 || start + length > sp.len)
    throw DimensionError("slice [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") out of range for " + shape_str(s));
  Shape os = s;
  os[axis] = length;
  std::vector<double> out(sp.outer * length * sp.inner);
  auto xd = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(xd.begin() + (o * sp.len + start) * sp.inner, length * sp.inner,
                out.begin() + o * length * sp.inner);
  NodePtr xn = x.node();
  return detail::make_result(std::move(os), std::move(out), {&x},
                             [xn, sp, start, length](Node& self) {
                               double* gx = detail::grad_target(xn);
                               if (!gx) return;
                               const std::size_t chunk = length * sp.inner;
                               for (std::size_t o = 0; o < sp.outer; ++o) {
                                 double* dst = gx + (o * sp.len + start) * sp.inner;
                                 const double* src = self.grad.data() + o * chunk;
                                 for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                               }
                             });
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  Broadcast p = plan_broadcast(x.shape(), shape);
  if (p.out != shape)
    throw DimensionError("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  std::vector<double> out(shape_numel(shape));
  auto xd = x.data();
  for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t) { out[i] = xd[ia]; });
  NodePtr xn = x.node();
  return detail::make_result(shape, std::move(out), {&x}, [xn, p](Node& self) {
    double* gx = detail::grad_target(xn);
    if (!gx) return;
    for_each_broadcast(
        p, [&](std::size_t i, std::size_t ia, std::size_t) { gx[ia] += self.grad[i]; });
  });
}

// ---------------------------------------------------------------- elementwise

Tensor elementwise(const Tensor& a, const Tensor& b, BinaryOp op) {
  Broadcast p = plan_broadcast(a.shape(), b.shape());
  std::vector<double> out(shape_numel(p.out));
  auto ad = a.data();
  auto bd = b.data();
  switch (op) {
    case BinaryOp::kAdd:
      for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        out[i] = ad[ia] + bd[ib];
      });
      break;
    case BinaryOp::kSub:
      for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        out[i] = ad[ia] - bd[ib];
      });
      break;
    case BinaryOp::kMul:
      for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        out[i] = ad[ia] * bd[ib];
      });
      break;
    case BinaryOp::kDiv:
      for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        out[i] = ad[ia] / bd[ib];
      });
      break;
  }
  NodePtr an = a.node(), bn = b.node();
  Shape os = p.out;
  return detail::make_result(std::move(os), std::move(out), {&a, &b}, [an, bn, p, op](Node& self) {
    double* ga = detail::grad_target(an);
    double* gb = detail::grad_target(bn);
    const double* g = self.grad.data();
    const double* av = an->data.data();
    const double* bv = bn->data.data();
    switch (op) {
      case BinaryOp::kAdd:
        for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (ga) ga[ia] += g[i];
          if (gb) gb[ib] += g[i];
        });
        break;
      case BinaryOp::kSub:
        for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (ga) ga[ia] += g[i];
          if (gb) gb[ib] -= g[i];
        });
        break;
      case BinaryOp::kMul:
        for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (ga) ga[ia] += g[i] * bv[ib];
          if (gb) gb[ib] += g[i] * av[ia];
        });
        break;
      case BinaryOp::kDiv:
        for_each_broadcast(p, [&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (ga) ga[ia] += g[i] / bv[ib];
          if (gb) gb[ib] -= g[i] * av[ia] / (bv[ib] * bv[ib]);
        });
        break;
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, BinaryOp::kAdd); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, BinaryOp::kSub); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, BinaryOp::kMul); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(a, b, BinaryOp::kDiv); }

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double s) {
  return unary(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return stable_sigmoid(v); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor pow(const Tensor& x, double exponent) {
  return unary(
      x, [exponent](double v) { return std::pow(v, exponent); },
      [exponent](double v, double) {
        if (exponent == 0.0) return 0.0;
        return exponent * std::pow(v, exponent - 1.0);
      });
}

// ---------------------------------------------------------------- reductions

Tensor reduce_sum(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim) {
  const Shape& s = x.shape();
  Shape kept = s;
  for (auto a : axes) {
    if (a >= s.size())
      throw DimensionError("reduce axis " + std::to_string(a) + " invalid for " + shape_str(s));
    kept[a] = 1;
  }
  Broadcast p = plan_broadcast(s, kept);
  std::vector<double> out(shape_numel(kept), 0.0);
  auto xd = x.data();
  for_each_broadcast(p, [&](std::size_t i, std::size_t, std::size_t ib) { out[ib] += xd[i]; });
  Shape os;
  if (keepdim) {
    os = kept;
  } else {
    for (std::size_t i = 0; i < s.size(); ++i)
      if (std::find(axes.begin(), axes.end(), i) == axes.end()) os.push_back(s[i]);
    if (os.empty()) os.push_back(1);
  }
  NodePtr xn = x.node();
  return detail::make_result(std::move(os), std::move(out), {&x}, [xn, p](Node& self) {
    double* gx = detail::grad_target(xn);
    if (!gx) return;
    for_each_broadcast(
        p, [&](std::size_t i, std::size_t, std::size_t ib) { gx[i] += self.grad[ib]; });
  });
}

Tensor reduce_mean(const Tensor& x, const std::vector<std::size_t>& axes, bool keepdim) {
  std::size_t count = 1;
  for (auto a : axes) count *= x.size(a);
  return mul_scalar(reduce_sum(x, axes, keepdim), 1.0 / static_cast<double>(count));
}

Tensor sum_all(const Tensor& x) {
  auto xd = x.data();
  double total = 0.0;
  for (double v : xd) total += v;
  NodePtr xn = x.node();
  return detail::make_result(Shape{1}, {total}, {&x}, [xn](Node& self) {
    double* gx = detail::grad_target(xn);
    if (!gx) return;
    for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += self.grad[0];
  });
}

Tensor mean_all(const Tensor& x) {
  return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------- softmax

namespace {

void check_finite(std::span<const double> v, const char* op) {
  for (double d : v)
    if (!std::isfinite(d)) throw NumericError(std::string(op) + " received a non-finite value");
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit sp = split_axis(x.shape(), axis);
  auto xd = x.data();
  check_finite(xd, "softmax");
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      double mx = xd[base];
      for (std::size_t j = 1; j < sp.len; ++j) mx = std::max(mx, xd[base + j * sp.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < sp.len; ++j) {
        const double e = std::exp(xd[base + j * sp.inner] - mx);
        out[base + j * sp.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] /= z;
    }
  }
  NodePtr xn = x.node();
  return detail::make_result(x.shape(), std::move(out), {&x}, [xn, sp](Node& self) {
    double* gx = detail::grad_target(xn);
    if (!gx) return;
    const double* y = self.data.data();
    const double* g = self.grad.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.len * sp.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < sp.len; ++j)
          dot += g[base + j * sp.inner] * y[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.len; ++j) {
          const std::size_t idx = base + j * sp.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit sp = split_axis(x.shape(), axis);
  auto xd = x.data();
  check_finite(xd, "log_softmax");
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      double mx = xd[base];
      for (std::size_t j = 1; j < sp.len; ++j) mx = std::max(mx, xd[base + j * sp.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < sp.len; ++j) z += std::exp(xd[base + j * sp.inner] - mx);
      const double lz = std::log(z) + mx;
      for (std::size_t j = 0; j < sp.len; ++j)
        out[base + j * sp.inner] = xd[base + j * sp.inner] - lz;
    }
  }
  NodePtr xn = x.node();
  return detail::make_result(x.shape(), std::move(out), {&x}, [xn, sp](Node& self) {
    double* gx = detail::grad_target(xn);
    if (!gx) return;
    const double* y = self.data.data();
    const double* g = self.grad.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.len * sp.inner + in;
        double gsum = 0.0;
        for (std::size_t j = 0; j < sp.len; ++j) gsum += g[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.len; ++j) {
          const std::size_t idx = base + j * sp.inner;
          gx[idx] += g[idx] - std::exp(y[idx]) * gsum;
        }
      }
    }
  });
}

// ---------------------------------------------------------------- layer norm

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("layer_norm affine of size " + std::to_string(gamma.numel()) +
                         " for input " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / c;
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mean) * rs;
      (*xhat)[r * c + j] = h;
      out[r * c + j] = h * gd[j] + bd[j];
    }
  }
  NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_result(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [xn, gn, bn, xhat, rstd, rows, c](Node& self) {
        double* gx = detail::grad_target(xn);
        double* gg = detail::grad_target(gn);
        double* gb = detail::grad_target(bn);
        const double* gam = gn->data.data();
        std::vector<double> t(c);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = self.grad.data() + r * c;
          const double* h = xhat->data() + r * c;
          if (gg)
            for (std::size_t j = 0; j < c; ++j) gg[j] += dy[j] * h[j];
          if (gb)
            for (std::size_t j = 0; j < c; ++j) gb[j] += dy[j];
          if (!gx) continue;
          double mean_t = 0.0, mean_th = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            t[j] = dy[j] * gam[j];
            mean_t += t[j];
            mean_th += t[j] * h[j];
          }
          mean_t /= static_cast<double>(c);
          mean_th /= static_cast<double>(c);
          const double rs = (*rstd)[r];
          for (std::size_t j = 0; j < c; ++j)
            gx[r * c + j] += rs * (t[j] - mean_t - h[j] * mean_th);
        }
      });
}

// ---------------------------------------------------------------- convolution

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3])
    throw DimensionError("conv2d shape mismatch: input " + shape_str(xs) + ", weight " +
                         shape_str(ws));
  if (stride == 0) throw ConfigError("conv2d stride must be positive");
  const std::size_t batch = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const std::size_t cout = ws[0], k = ws[2];
  if (h + 2 * padding < k || w + 2 * padding < k)
    throw DimensionError("conv2d input " + shape_str(xs) + " smaller than kernel " +
                         std::to_string(k));
  if (bias.defined() && bias.numel() != cout)
    throw DimensionError("conv2d bias of size " + std::to_string(bias.numel()) + " for " +
                         std::to_string(cout) + " output channels");
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (w + 2 * padding - k) / stride + 1;
  const std::size_t rows = cin * k * k, cols = ho * wo;

  const bool keep_cols = graph::grad_enabled() &&
                         (x.requires_grad() || weight.requires_grad() || bias.requires_grad());
  auto all_cols = std::make_shared<std::vector<double>>();
  std::vector<double> scratch;
  if (keep_cols)
    all_cols->resize(batch * rows * cols);
  else
    scratch.resize(rows * cols);

  auto im2col = [=](const double* img, double* col) {
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          double* dst = col + ((ci * k + ky) * k + kx) * cols;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
              dst[oy * wo + ox] = (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 &&
                                   ix < static_cast<long>(w))
                                      ? img[(ci * h + iy) * w + ix]
                                      : 0.0;
            }
          }
        }
  };

  std::vector<double> out(batch * cout * cols);
  const double* xd = x.data().data();
  ConstMap wmat(weight.data().data(), cout, rows);
  for (std::size_t b = 0; b < batch; ++b) {
    double* col = keep_cols ? all_cols->data() + b * rows * cols : scratch.data();
    im2col(xd + b * cin * h * w, col);
    MutMap o(out.data() + b * cout * cols, cout, cols);
    o.noalias() = wmat * ConstMap(col, rows, cols);
    if (bias.defined()) {
      auto bd = bias.data();
      for (std::size_t co = 0; co < cout; ++co) o.row(co).array() += bd[co];
    }
  }

  NodePtr xn = x.node(), wn = weight.node();
  NodePtr bn = bias.defined() ? bias.node() : nullptr;
  return detail::make_result(
      Shape{batch, cout, ho, wo}, std::move(out), {&x, &weight, bias.defined() ? &bias : nullptr},
      [=](Node& self) {
        double* gx = detail::grad_target(xn);
        double* gw = detail::grad_target(wn);
        double* gb = detail::grad_target(bn);
        ConstMap wm(wn->data.data(), cout, rows);
        std::vector<double> dcol(gx ? rows * cols : 0);
        for (std::size_t b = 0; b < batch; ++b) {
          ConstMap dout(self.grad.data() + b * cout * cols, cout, cols);
          const double* col = all_cols->data() + b * rows * cols;
          if (gw) MutMap(gw, cout, rows).noalias() += dout * ConstMap(col, rows, cols).transpose();
          if (gb)
            for (std::size_t co = 0; co < cout; ++co) gb[co] += dout.row(co).sum();
          if (!gx) continue;
          MutMap(dcol.data(), rows, cols).noalias() = wm.transpose() * dout;
          double* img = gx + b * cin * h * w;
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const double* src = dcol.data() + ((ci * k + ky) * k + kx) * cols;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  for (std::size_t ox = 0; ox < wo; ++ox) {
                    const long ix =
                        static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                    if (ix < 0 || ix >= static_cast<long>(w)) continue;
                    img[(ci * h + iy) * w + ix] += src[oy * wo + ox];
                  }
                }
              }
        }
      });
}

// ---------------------------------------------------------------- resampling

namespace {

struct LerpTable {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

LerpTable lerp_table(std::size_t in, std::size_t out) {
  LerpTable t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t l = static_cast<std::size_t>(src);
    if (l > in - 1) l = in - 1;
    t.lo[i] = l;
    t.hi[i] = std::min(l + 1, in - 1);
    t.frac[i] = src - static_cast<double>(l);
  }
  return t;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  const Shape& s = x.shape();
  if (s.size() != 4 || out_h == 0 || out_w == 0)
    throw DimensionError("upsample_bilinear expects [B, C, H, W], got " + shape_str(s));
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  auto ty = std::make_shared<LerpTable>(lerp_table(h, out_h));
  auto tx = std::make_shared<LerpTable>(lerp_table(w, out_w));
  auto xd = x.data();
  std::vector<double> out(planes * out_h * out_w);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xd.data() + p * h * w;
    double* dst = out.data() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const double fy = ty->frac[oy];
      const double* r0 = src + ty->lo[oy] * w;
      const double* r1 = src + ty->hi[oy] * w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const double fx = tx->frac[ox];
        const std::size_t x0 = tx->lo[ox], x1 = tx->hi[ox];
        const double top = r0[x0] + fx * (r0[x1] - r0[x0]);
        const double bot = r1[x0] + fx * (r1[x1] - r1[x0]);
        dst[oy * out_w + ox] = top + fy * (bot - top);
      }
    }
  }
  NodePtr xn = x.node();
  return detail::make_result(
      Shape{s[0], s[1], out_h, out_w}, std::move(out), {&x},
      [xn, ty, tx, planes, h, w, out_h, out_w](Node& self) {
        double* gx = detail::grad_target(xn);
        if (!gx) return;
        for (std::size_t p = 0; p < planes; ++p) {
          double* dst = gx + p * h * w;
          const double* g = self.grad.data() + p * out_h * out_w;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const double fy = ty->frac[oy];
            double* r0 = dst + ty->lo[oy] * w;
            double* r1 = dst + ty->hi[oy] * w;
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const double fx = tx->frac[ox];
              const std::size_t x0 = tx->lo[ox], x1 = tx->hi[ox];
              const double gv = g[oy * out_w + ox];
              r0[x0] += gv * (1 - fy) * (1 - fx);
              r0[x1] += gv * (1 - fy) * fx;
              r1[x0] += gv * fy * (1 - fx);
              r1[x1] += gv * fy * fx;
            }
          }
        }
      });
}

}  // namespace knet

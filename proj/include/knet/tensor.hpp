#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "knet/errors.hpp"

namespace knet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Numeric mode of the whole process. Storage is always double; in kF32 mode
// every op output and every optimizer update is rounded to the nearest float,
// so values (and their serialized f32 form) behave as single precision.
enum class Precision { kF32, kF64 };

void set_precision(Precision p);
Precision precision();

// Rounds in place when the current mode is kF32.
void round_to_precision(std::span<double> values);

class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p) : saved_(precision()) { set_precision(p); }
  ~PrecisionScope() { set_precision(saved_); }
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision saved_;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool leaf = true;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

// Handle to a node of the define-by-run graph. Copies share storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access. Only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double value(std::size_t flat_index) const { return data()[flat_index]; }
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Reverse pass from a single-element tensor over the recorded graph.
  void backward() const;

  // Same values, no history.
  Tensor detach() const;
  Tensor clone() const;

  const detail::NodePtr& node() const { return node_; }
  static Tensor wrap(detail::NodePtr node);

 private:
  detail::NodePtr node_;
};

// Operation record of the current thread. Ops append nodes whose inputs
// require grad; backward() walks it in exact reverse and then clears it.
namespace graph {

std::size_t recorded_ops();
void clear();
bool grad_enabled();

}  // namespace graph

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

namespace detail {

// Builds an op result. When any input requires grad (and grad mode is on), the
// node is recorded and `backward` will be called with the node during the
// reverse pass. Values are rounded to the current precision.
Tensor make_result(Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward);
Tensor make_result(Shape shape, std::vector<double> values,
                   const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward);

// Gradient buffer of an input if it takes part in differentiation.
inline double* grad_target(const NodePtr& n) {
  if (!n || !n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

}  // namespace detail

}  // namespace knet

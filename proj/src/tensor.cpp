#include "knet/tensor.hpp"

#include <atomic>
#include <sstream>

namespace knet {

namespace {

std::atomic<Precision> g_precision{Precision::kF32};

struct ThreadGraph {
  std::vector<detail::NodePtr> tape;
  bool grad_enabled = true;
};

ThreadGraph& thread_graph() {
  thread_local ThreadGraph g;
  return g;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void set_precision(Precision p) { g_precision.store(p); }
Precision precision() { return g_precision.load(); }

void round_to_precision(std::span<double> values) {
  if (precision() != Precision::kF32) return;
  for (auto& v : values) v = static_cast<double>(static_cast<float>(v));
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  node_ = std::make_shared<detail::Node>();
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
  round_to_precision(node_->data);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != values.size())
    throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
  round_to_precision(node_->data);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, value); }

Tensor Tensor::wrap(detail::NodePtr node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->shape;
}

std::size_t Tensor::size(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw ContractError("use of an undefined tensor");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

std::vector<double> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_) throw ContractError("use of an undefined tensor");
  if (!node_->leaf) throw ContractError("requires_grad can only be toggled on leaves");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return node_ && node_->leaf; }

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!node_) throw ContractError("use of an undefined tensor");
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

void Tensor::backward() const {
  if (numel() != 1)
    throw ContractError("backward() needs a single-element tensor, got " + shape_str(shape()));
  auto& tape = thread_graph().tape;
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  // Each node's consumers were recorded after it, so a reverse sweep has
  // fully accumulated a node's gradient before propagating it.
  for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
    detail::Node& n = **it;
    if (!n.grad.empty() && n.backward) n.backward(n);
  }
  tape.clear();
}

Tensor Tensor::detach() const {
  Tensor t(shape(), to_vector(), false);
  return t;
}

Tensor Tensor::clone() const {
  Tensor t(shape(), to_vector(), requires_grad());
  return t;
}

namespace graph {

std::size_t recorded_ops() { return thread_graph().tape.size(); }
void clear() { thread_graph().tape.clear(); }
bool grad_enabled() { return thread_graph().grad_enabled; }

}  // namespace graph

NoGradGuard::NoGradGuard() : saved_(thread_graph().grad_enabled) {
  thread_graph().grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { thread_graph().grad_enabled = saved_; }

namespace detail {

namespace {

Tensor finish(Shape shape, std::vector<double> values, bool needs_grad,
              std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  round_to_precision(node->data);
  if (needs_grad) {
    node->requires_grad = true;
    node->leaf = false;
    node->backward = std::move(backward);
    thread_graph().tape.push_back(node);
  }
  return Tensor::wrap(std::move(node));
}

}  // namespace

Tensor make_result(Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward) {
  bool needs = false;
  if (thread_graph().grad_enabled)
    for (const Tensor* t : inputs) needs = needs || (t && t->requires_grad());
  return finish(std::move(shape), std::move(values), needs, std::move(backward));
}

Tensor make_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward) {
  bool needs = false;
  if (thread_graph().grad_enabled)
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  return finish(std::move(shape), std::move(values), needs, std::move(backward));
}

}  // namespace detail

}  // namespace knet

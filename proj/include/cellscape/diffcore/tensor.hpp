#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a handle to a graph node. Ops build new nodes that remember
// their inputs and a backward closure; backward(loss) walks the graph in
// reverse topological order. Only leaves (parameters) keep their gradients
// after a pass; intermediate gradients are released.

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cellscape/error.hpp"

namespace cellscape::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;  // empty for leaves

  /// Gradient buffer, allocated (zeroed) on first use.
  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape);
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor scalar(double v) { return constant({}, {v}); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  const std::vector<double>& value() const { return node_->value; }
  std::vector<double>& mutable_value() { return node_->value; }
  const std::vector<double>& grad() const { return node_->grad; }
  std::vector<double>& mutable_grad() { return node_->grad_buffer(); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const;

  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Creates an op result. The backward closure is kept only when some input
/// requires a gradient.
Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward_fn);

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires a
/// gradient. Throws on a non-scalar loss, a cyclic graph, or a second call on
/// the same loss without reset_backward().
void backward(const Tensor& loss);
void reset_backward(const Tensor& loss);

void zero_grad(const std::vector<Tensor>& params);

/// Keeps large freed blocks in the heap (glibc only) so the per-step tensor
/// buffers are recycled instead of page-faulted in again. Process-wide and
/// idempotent.
void retain_freed_memory();

}  // namespace cellscape::ad

#include "cellscape/diffcore/tensor.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <cmath>
#include <unordered_map>

namespace cellscape::ad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? ", " : "") + std::to_string(shape[i]);
  return s + "]";
}

namespace {

std::shared_ptr<Node> leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size())
    throw DimensionMismatch("tensor values for shape " + shape_string(shape), numel(shape), values.size());
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return n;
}

}  // namespace

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  return Tensor(leaf(std::move(shape), std::move(values), false));
}

Tensor Tensor::zeros(Shape shape) {
  const std::size_t n = ad::numel(shape);
  return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
  return Tensor(leaf(std::move(shape), std::move(values), true));
}

double Tensor::item() const {
  if (numel() != 1) throw InvalidArgument("item() on a tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  if (numel(shape) != value.size()) throw DimensionMismatch("op output for shape " + shape_string(shape), numel(shape), value.size());
#ifndef NDEBUG
  for (double v : value)
    if (!std::isfinite(v)) throw NumericalError("non-finite value produced by an op");
#endif
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (const auto& t : inputs) n->requires_grad = n->requires_grad || t.requires_grad();
  if (n->requires_grad) {
    n->inputs.reserve(inputs.size());
    for (const auto& t : inputs) n->inputs.push_back(t.ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw InvalidArgument("backward on an undefined tensor");
  if (loss.numel() != 1) throw InvalidArgument("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  Node* root = loss.node();
  if (root->consumed) throw InvalidArgument("backward already ran on this loss; call reset_backward first");
  if (!root->requires_grad) {
    root->consumed = true;
    return;
  }

  // Iterative DFS for a post order; state 1 = on the stack, 2 = finished.
  std::vector<Node*> order;
  std::unordered_map<Node*, int> state;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  state[root] = 1;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (!child->requires_grad) continue;
      int& s = state[child];
      if (s == 1) throw InvalidArgument("computation graph contains a cycle");
      if (s == 0) {
        s = 1;
        stack.emplace_back(child, 0);
      }
      continue;
    }
    state[node] = 2;
    order.push_back(node);
    stack.pop_back();
  }

  for (Node* n : order)
    if (n->backward_fn) n->grad.assign(n->value.size(), 0.0);
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      n->backward_fn(*n);
      std::vector<double>().swap(n->grad);
    }
  }
  root->consumed = true;
}

void reset_backward(const Tensor& loss) {
  if (loss.defined()) loss.node()->consumed = false;
}

void zero_grad(const std::vector<Tensor>& params) {
  for (const auto& p : params) {
    auto& g = p.node()->grad;
    std::fill(g.begin(), g.end(), 0.0);
  }
}

void retain_freed_memory() {
#ifdef __GLIBC__
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace cellscape::ad

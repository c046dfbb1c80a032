#pragma once

#include <functional>
#include <vector>

#include "molang/tensor.hpp"

namespace molang {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape at tensor-op granularity. Nodes are appended in
// topological order by construction, so backward is a single reverse sweep.
// One tape corresponds to one forward pass; it is not reused across steps.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily in backward()
    std::vector<int> parents;
    std::function<void(Tape&, int)> backward_fn;  // nullptr for leaves
    bool needs_grad = false;
  };

  Var leaf(Tensor value, bool needs_grad = false) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var emit(Tensor value, std::vector<int> parents,
           std::function<void(Tape&, int)> backward_fn) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    bool any = false;
    for (int p : n.parents) any = any || nodes_[static_cast<size_t>(p)].needs_grad;
    n.needs_grad = any;
    if (any) n.backward_fn = std::move(backward_fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
  Tensor& val_mut(Var v) { return nodes_[static_cast<size_t>(v.id)].value; }
  const Tensor& grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].grad; }
  bool needs_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].needs_grad; }

  // Gradient accumulator for op backward functions; allocates on first touch.
  Tensor& grad_acc(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
  }

  // Like grad_acc, but skips the zero fill: when *fresh comes back true the
  // caller must assign every element instead of accumulating. Only valid for
  // ops whose backward writes the parent's full gradient in one shot.
  Tensor& grad_buf(int id, bool* fresh) {
    Node& n = nodes_[static_cast<size_t>(id)];
    *fresh = n.grad.data.empty();
    if (*fresh) n.grad = Tensor::uninit(n.value.shape);
    return n.grad;
  }

  void backward(Var root) {
    Node& r = nodes_[static_cast<size_t>(root.id)];
    if (r.value.numel() != 1) throw ShapeError("backward: root must be scalar");
    grad_acc(root.id).data[0] = 1.0f;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.backward_fn && !n.grad.data.empty()) n.backward_fn(*this, i);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

}  // namespace molang

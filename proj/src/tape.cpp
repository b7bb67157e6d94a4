#include "pop/tape.hpp"

#include "pop/errors.hpp"

namespace pop {

GradientTape* common_tape(std::initializer_list<const Tensor*> inputs) {
  GradientTape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t || !t->tracked()) continue;
    if (tape && tape != t->tape()) throw ContractError("inputs are tracked by different tapes");
    tape = t->tape();
  }
  return tape;
}

Tensor GradientTape::leaf(const Tensor& value) {
  if (!value.defined()) throw ContractError("cannot register an undefined tensor as a leaf");
  Node node;
  node.shape = value.shape();
  node.is_leaf = true;
  node.leaf = leaves_.size();
  leaves_.push_back(nodes_.size());
  nodes_.push_back(std::move(node));

  Tensor t = value.detach();
  t.tape_ = this;
  t.node_ = nodes_.size() - 1;
  return t;
}

LeafId GradientTape::leaf_id(const Tensor& t) const {
  if (t.tape() != this || !nodes_.at(t.node()).is_leaf) {
    throw ContractError("tensor is not a leaf of this tape");
  }
  return nodes_[t.node()].leaf;
}

Tensor GradientTape::record(Tensor value, std::span<const Tensor* const> inputs, BackwardFn fn) {
  Node node;
  node.shape = value.shape();
  node.fn = std::move(fn);
  node.inputs.reserve(inputs.size());
  for (const Tensor* in : inputs) {
    if (in && in->tracked()) {
      if (in->tape() != this) throw ContractError("input is tracked by a different tape");
      node.inputs.push_back(in->node());
    } else {
      node.inputs.push_back(kUntracked);
    }
  }
  nodes_.push_back(std::move(node));
  value.tape_ = this;
  value.node_ = nodes_.size() - 1;
  return value;
}

Gradients GradientTape::backward(const Tensor& loss) const {
  if (loss.tape() != this) throw ContractError("loss is not tracked by this tape");
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }

  std::vector<Buffer> grads(nodes_.size());
  grads[loss.node()].assign(1, 1.0);

  std::vector<Buffer*> in_ptrs;
  for (NodeId n = loss.node() + 1; n-- > 0;) {
    const Node& node = nodes_[n];
    if (grads[n].empty() || node.is_leaf) continue;
    in_ptrs.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      NodeId src = node.inputs[i];
      if (src == kUntracked) continue;
      if (grads[src].empty()) grads[src].assign(shape_numel(nodes_[src].shape), 0.0);
      in_ptrs[i] = &grads[src];
    }
    node.fn(grads[n], in_ptrs);
    Buffer().swap(grads[n]);
  }

  std::vector<Tensor> out;
  out.reserve(leaves_.size());
  for (NodeId id : leaves_) {
    const Shape& shape = nodes_[id].shape;
    if (grads[id].empty()) {
      out.push_back(Tensor::zeros(shape));
    } else {
      out.emplace_back(shape, std::move(grads[id]));
    }
  }
  return Gradients(std::move(out));
}

bool GradientTape::is_topological() const {
  for (NodeId n = 0; n < nodes_.size(); ++n) {
    for (NodeId src : nodes_[n].inputs) {
      if (src != kUntracked && src >= n) return false;
    }
  }
  return true;
}

}  // namespace pop

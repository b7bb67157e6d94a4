#pragma once

#include <functional>
#include <span>
#include <vector>

#include "pop/tensor.hpp"

namespace pop {

using LeafId = std::size_t;

// Gradients of a scalar with respect to every leaf registered on a tape,
// indexed by LeafId. Leaves the loss does not depend on get zeros.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}

  const Tensor& operator[](LeafId id) const { return grads_.at(id); }
  double scalar(LeafId id) const { return grads_.at(id).item(); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor> grads_;
};

// Append-only record of operations for reverse-mode differentiation.
//
// Each node stores the ids of its tracked inputs and a closure mapping the
// gradient of its output onto gradients of its inputs. Because nodes are only
// appended after their inputs exist, the node list is topologically sorted and
// backward() is a single reverse sweep. Gradients reaching a node through
// several paths are summed in node-index order, so results are deterministic.
//
// A tape and the tensors it tracks belong to one thread.
class GradientTape {
 public:
  // grad_in[i] is null when input i is untracked; otherwise the closure adds
  // its contribution into it.
  using BackwardFn =
      std::function<void(std::span<const double> grad_out, std::span<Buffer* const> grad_in)>;

  static constexpr NodeId kUntracked = static_cast<NodeId>(-1);

  GradientTape() = default;
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  // Registers a differentiable input. The returned tensor shares data with
  // `value` and is tracked by this tape.
  Tensor leaf(const Tensor& value);
  LeafId leaf_id(const Tensor& t) const;

  Tensor record(Tensor value, std::span<const Tensor* const> inputs, BackwardFn fn);
  Tensor record(Tensor value, std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Tensor* const>(inputs.begin(), inputs.size()),
                  std::move(fn));
  }

  // Reverse sweep from a scalar loss. Throws ContractError when the loss is
  // not a one-element tensor tracked by this tape.
  Gradients backward(const Tensor& loss) const;

  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_leaves() const { return leaves_.size(); }
  bool is_topological() const;

 private:
  struct Node {
    Shape shape;
    std::vector<NodeId> inputs;
    BackwardFn fn;
    LeafId leaf = 0;
    bool is_leaf = false;
  };

  std::vector<Node> nodes_;
  std::vector<NodeId> leaves_;
};

// Tape shared by the tracked tensors among `inputs`, or null when none is
// tracked. Throws ContractError when inputs come from different tapes.
GradientTape* common_tape(std::initializer_list<const Tensor*> inputs);

}  // namespace pop

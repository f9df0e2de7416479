#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dst/numcore/errors.hpp"
#include "dst/numcore/tensor.hpp"

namespace dst::num {

using NodeId = std::size_t;

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// tape that produced it is alive and has not been cleared.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  NodeId id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

// grad_in[i] is null when input i does not require a gradient; otherwise it
// points at that input's adjoint, already shaped like the input's value.
using BackwardFn =
    std::function<void(const Tape& tape, const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

/// Adjoints of the requires-grad leaves of a tape, keyed by node id.
class GradientMap {
 public:
  const Tensor& at(NodeId id) const {
    auto it = grads_.find(id);
    if (it == grads_.end()) throw IndexError("no gradient recorded for node " + std::to_string(id));
    return it->second;
  }
  const Tensor& at(const Var& v) const { return at(v.id()); }
  bool contains(NodeId id) const { return grads_.count(id) != 0; }
  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

  void insert(NodeId id, Tensor g) { grads_.insert_or_assign(id, std::move(g)); }
  Tensor take(NodeId id) {
    auto it = grads_.find(id);
    if (it == grads_.end()) throw IndexError("no gradient recorded for node " + std::to_string(id));
    Tensor g = std::move(it->second);
    grads_.erase(it);
    return g;
  }

 private:
  std::map<NodeId, Tensor> grads_;
};

/// Reverse-mode recording of tensor operations.
///
/// Reset rule: the tape keeps every recorded value until clear(). backward()
/// may be called more than once; each call starts from zeroed adjoints.
/// Adjoints of non-leaf nodes are released while backward() runs, so only the
/// returned leaf gradients survive it.
///
/// Single-threaded; give each thread its own tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, true, false, {}, {}});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Records an operation output. The node requires a gradient iff any input
  // does; the backward rule is dropped otherwise.
  Var record(Tensor value, std::vector<NodeId> inputs, BackwardFn backward) {
    bool needs = false;
    for (NodeId in : inputs) {
      check_id(in);
      needs = needs || nodes_[in].requires_grad;
    }
    Node node{std::move(value), {}, needs, false, false, {}, {}};
    if (needs) {
      node.inputs = std::move(inputs);
      node.backward = std::move(backward);
    }
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(NodeId id) const {
    check_id(id);
    return nodes_[id].value;
  }

  bool requires_grad(NodeId id) const {
    check_id(id);
    return nodes_[id].requires_grad;
  }

  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  GradientMap backward(const Var& loss) {
    if (&loss.tape() != this) throw ContractError("backward: loss was recorded on another tape");
    check_id(loss.id());
    if (nodes_[loss.id()].value.size() != 1) {
      throw ContractError("backward: loss must be a scalar, got shape " +
                          shape_str(nodes_[loss.id()].value.shape()));
    }
    for (auto& n : nodes_) {
      n.has_adjoint = false;
      n.adjoint = Tensor();
    }
    Node& root = nodes_[loss.id()];
    if (root.requires_grad) {
      root.adjoint = Tensor(root.value.shape(), 1.0);
      root.has_adjoint = true;
    }

    std::vector<Tensor*> grad_in;
    for (NodeId id = loss.id() + 1; id-- > 0;) {
      Node& node = nodes_[id];
      if (!node.has_adjoint || node.leaf || !node.backward) continue;
      grad_in.assign(node.inputs.size(), nullptr);
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        Node& in = nodes_[node.inputs[i]];
        if (!in.requires_grad) continue;
        if (!in.has_adjoint) {
          in.adjoint = zeros_like(in.value);
          in.has_adjoint = true;
        }
        grad_in[i] = &in.adjoint;
      }
      node.backward(*this, node.adjoint, grad_in);
      node.adjoint = Tensor();
      node.has_adjoint = false;
    }

    GradientMap out;
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (!n.leaf || !n.requires_grad) continue;
      if (n.has_adjoint) {
        out.insert(id, std::move(n.adjoint));
        n.adjoint = Tensor();
        n.has_adjoint = false;
      } else {
        out.insert(id, zeros_like(n.value));
      }
    }
    return out;
  }

 private:
  struct Node {
    Tensor value;
    Tensor adjoint;
    bool requires_grad = false;
    bool leaf = false;
    bool has_adjoint = false;
    std::vector<NodeId> inputs;
    BackwardFn backward;
  };

  void check_id(NodeId id) const {
    if (id >= nodes_.size()) throw IndexError("tape node " + std::to_string(id) + " does not exist");
  }

  // deque: values stay put while later nodes are appended.
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

}  // namespace dst::num

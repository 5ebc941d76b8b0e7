#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "amad/errors.hpp"

namespace amad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

class GradTape;

// Dense row-major f64 tensor. Copies are shallow (the value buffer is
// shared); operations allocate fresh output buffers, so a buffer never
// changes after it is produced. The optimizer mutating parameter buffers
// between tapes is the one sanctioned exception.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<double>>(shape_numel(shape_), fill)) {}

  Tensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(std::move(values))) {
    if (data_->size() != shape_numel(shape_)) {
      throw ShapeError("tensor: " + std::to_string(data_->size()) + " values do not fill shape " +
                       shape_str(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }
  const std::shared_ptr<std::vector<double>>& buffer() const { return data_; }

  double item() const {
    if (size() != 1) throw ContractError("item(): tensor has " + std::to_string(size()) + " elements");
    return (*data_)[0];
  }

  bool tracked() const { return tape_ != nullptr && node_ >= 0; }
  GradTape* tape() const { return tape_; }
  int node() const { return node_; }

  // Value-equal view with no gradient node; nothing flows through it.
  Tensor detached() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
  }

  // Deep copy of the value buffer (used for checkpoint snapshots).
  Tensor clone() const {
    Tensor t(shape_, std::vector<double>(*data_));
    return t;
  }

  // Binds this tensor to a tape node; operation implementations only.
  void bind(GradTape* tape, int node) {
    tape_ = tape;
    node_ = node;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  GradTape* tape_ = nullptr;
  int node_ = -1;
};

inline Tensor detach(const Tensor& x) { return x.detached(); }

// Reverse-mode tape. Nodes are appended in execution order, which is a
// valid topological order (an operation's parents are always recorded
// before it). backward() sweeps the recording once from the loss down.
//
// Gradient lifetime: leaf (parameter) gradients accumulate across repeated
// backward() calls until zero_grad(); intermediate gradients are dropped at
// the end of every sweep so a second backward on the same tape cannot
// re-propagate them.
class GradTape {
 public:
  using BackwardFn = std::function<void(GradTape&, const std::vector<double>&)>;

  // Registers an existing value tensor as a differentiable leaf.
  // The returned tensor shares the value buffer.
  Tensor leaf(const Tensor& value) {
    nodes_.push_back(Node{nullptr, {}, value.size(), true});
    Tensor t = value;
    t.bind(this, static_cast<int>(nodes_.size()) - 1);
    return t;
  }

  int record(std::size_t numel, BackwardFn fn) {
    nodes_.push_back(Node{std::move(fn), {}, numel, false});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<double>& grad(int node) {
    Node& n = nodes_[static_cast<std::size_t>(node)];
    if (n.grad.empty()) n.grad.assign(n.numel, 0.0);
    return n.grad;
  }

  bool has_grad(int node) const { return !nodes_[static_cast<std::size_t>(node)].grad.empty(); }

  // Accumulates d(loss)/d(leaf) into every reachable leaf. loss must be a
  // scalar recorded on this tape.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (loss.tape() != this || !loss.tracked()) {
      throw ContractError("backward: loss is not recorded on this tape");
    }
    grad(loss.node())[0] += 1.0;
    for (int i = loss.node(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.grad.empty() || n.leaf || !n.back) continue;
      n.back(*this, n.grad);
    }
    for (Node& n : nodes_) {
      if (!n.leaf) std::vector<double>().swap(n.grad);
    }
  }

  void zero_grad() {
    for (Node& n : nodes_) std::vector<double>().swap(n.grad);
  }

  // Gradient snapshot for a tensor registered on this tape (zeros if the
  // last backward never reached it).
  Tensor grad_tensor(const Tensor& t) const {
    if (t.tape() != this || !t.tracked()) {
      throw ContractError("grad_tensor: tensor is not recorded on this tape");
    }
    const Node& n = nodes_[static_cast<std::size_t>(t.node())];
    if (n.grad.empty()) return Tensor(t.shape(), 0.0);
    return Tensor(t.shape(), n.grad);
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    BackwardFn back;
    std::vector<double> grad;
    std::size_t numel;
    bool leaf;
  };
  std::vector<Node> nodes_;
};

}  // namespace amad

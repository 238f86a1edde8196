#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "odl/numerics/tensor.hpp"

namespace odl::nn {

template <typename T>
class Tape;

// Handle to a value recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
  T item() const { return value().item(); }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

// Records one forward pass and replays it in reverse. A recording tape can be
// consumed by backward() exactly once; an inference tape (record == false)
// stores values only.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  bool consumed() const { return consumed_; }
  std::size_t node_count() const { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) {
    return Var<T>(this, push(std::move(value), false, nullptr, "constant"));
  }

  // Each parameter appears once per tape; its gradient is added into
  // Parameter::grad when backward() runs.
  Var<T> param(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var<T>(this, it->second);
    Node n;
    n.external = &p.value;
    n.param = &p;
    n.needs_grad = record_;
    nodes_.push_back(std::move(n));
    int id = static_cast<int>(nodes_.size()) - 1;
    param_nodes_[&p] = id;
    return Var<T>(this, id);
  }

  // A const parameter is recorded as a frozen input: it receives no gradient.
  Var<T> param(const Parameter<T>& p) {
    Node n;
    n.external = &p.value;
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Tensor<T>& value(int id) const {
    const auto& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }

  std::vector<T>& grad(int id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(id).size(), T{0});
    return n.grad;
  }

  int push(Tensor<T> value, bool needs_grad, BackwardFn fn, const char* op) {
    for (const T& v : value.data) {
      if (!std::isfinite(v)) {
        throw NumericError(std::string("non-finite value produced by ") + op + " with shape " +
                           shape_str(value.shape));
      }
    }
    Node n;
    n.value = std::move(value);
    n.needs_grad = record_ && needs_grad;
    if (n.needs_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  void backward(const Var<T>& loss) {
    if (!record_) throw Error("backward on an inference tape");
    if (consumed_) throw Error("tape already consumed by backward");
    if (loss.value().size() != 1) {
      throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    consumed_ = true;
    if (!nodes_[loss.id()].needs_grad) return;
    grad(loss.id())[0] = T{1};
    for (int id = loss.id(); id >= 0; --id) {
      auto& n = nodes_[id];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param) {
        auto& dst = n.param->grad;
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    std::vector<T> grad;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
  };

  bool record_;
  bool consumed_ = false;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, int> param_nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

}  // namespace odl::nn

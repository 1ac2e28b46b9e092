// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "eavl/tensor.hpp"

namespace eavl {

/// A named learnable tensor plus its gradient accumulator.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

/// Owns every Parameter of a model, in registration order. Addresses are
/// stable for the lifetime of the store.
template <typename T>
class ParameterStore {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> init) {
    if (index_.count(name) != 0) throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->grad = Tensor<T>(init.shape());
    p->value = std::move(init);
    index_.emplace(name, params_.size());
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  Parameter<T>& get(const std::string& name) {
    Parameter<T>* p = find(name);
    if (p == nullptr) throw ConfigError("unknown parameter: " + name);
    return *p;
  }
  const Parameter<T>& get(const std::string& name) const {
    const Parameter<T>* p = find(name);
    if (p == nullptr) throw ConfigError("unknown parameter: " + name);
    return *p;
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.fill(T{0});
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
};

/// Reverse-mode recording of differentiable operations. Nodes are appended in
/// execution order; backward() visits them once each, last to first.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Value that never receives a gradient.
  Var<T> constant(Tensor<T> v) {
    Node n;
    n.value = std::move(v);
    return push(std::move(n));
  }

  /// Free input whose gradient is kept and readable after backward().
  Var<T> leaf(Tensor<T> v) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = true;
    return push(std::move(n));
  }

  /// Parameter reference; backward() accumulates straight into p.grad.
  Var<T> param(Parameter<T>& p) {
    Node n;
    n.external = &p.value;
    n.external_grad = &p.grad;
    n.requires_grad = true;
    return push(std::move(n));
  }

  /// Appends the result of an operation. The backward closure receives the
  /// upstream gradient and accumulates into its inputs via grad().
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                  std::move(fn));
  }
  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, Backward fn) {
    Node n;
    n.value = std::move(value);
    for (const Var<T>& v : inputs) n.requires_grad = n.requires_grad || requires_grad(v);
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }

  const Tensor<T>& value(Var<T> v) const {
    const Node& n = nodes_[v.id];
    return n.external != nullptr ? *n.external : n.value;
  }

  /// Gradient accumulator of v, zero-initialised on first use.
  Tensor<T>& grad(Var<T> v) {
    Node& n = nodes_[v.id];
    if (n.external_grad != nullptr) return *n.external_grad;
    if (!n.has_grad) {
      n.grad = Tensor<T>(value(v).shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Gradient of a leaf after backward(); zeros if nothing flowed into it.
  Tensor<T> leaf_grad(Var<T> v) const {
    const Node& n = nodes_[v.id];
    if (n.external_grad != nullptr) return *n.external_grad;
    return n.has_grad ? n.grad : Tensor<T>(value(v).shape());
  }

  void backward(Var<T> loss) {
    if (value(loss).size() != 1) {
      throw DimensionError("backward() needs a scalar loss, got shape " +
                           to_string(value(loss).shape()));
    }
    visited_.clear();
    if (!requires_grad(loss)) return;
    grad(loss)[0] += T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      visited_.push_back(static_cast<std::uint32_t>(i));
      n.backward(*this, n.grad);
      // Intermediate gradients are dead once propagated.
      n.grad = Tensor<T>();
      n.has_grad = false;
    }
  }

  std::size_t size() const { return nodes_.size(); }
  bool is_operation(std::uint32_t id) const { return static_cast<bool>(nodes_[id].backward); }

  /// Node ids whose backward closure ran during the last backward(), in order.
  const std::vector<std::uint32_t>& last_backward_order() const { return visited_; }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    Tensor<T>* external_grad = nullptr;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
  };

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
  std::vector<std::uint32_t> visited_;
};

}  // namespace eavl

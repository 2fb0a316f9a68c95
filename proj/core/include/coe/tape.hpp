#pragma once

#include <cassert>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "coe/tensor.hpp"

namespace coe {

// Reverse-mode tape. Operations append nodes in execution order, so operand
// ids always precede their consumers; backward replays in strict reverse.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const T>, Tape&)>;

  // Registers a leaf whose gradient accumulates into the tensor's persistent
  // grad storage across backward calls.
  int watch(Tensor<T>& leaf) {
    leaf.enable_grad();
    auto acc = leaf.grad_storage();
    const int id = add_node({}, leaf.size(), [acc](std::span<const T> g, Tape&) {
      auto& a = *acc;
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += g[i];
    });
    leaf.bind(this, id);
    return id;
  }

  int record(Tensor<T>& out, std::vector<int> inputs, BackwardFn fn) {
    for (int in : inputs) assert(in >= 0 && in < static_cast<int>(nodes_.size()));
    const int id = add_node(std::move(inputs), out.size(), std::move(fn));
    out.bind(this, id);
    return id;
  }

  // Accumulates d(root)/d(leaf) into every watched leaf reachable from root.
  void backward(const Tensor<T>& root) {
    const int r = root.node_on(this);
    if (r < 0) throw UsageError("backward: root is not recorded on this tape");
    if (!root.is_scalar())
      throw UsageError("backward: root must be scalar, got " + shape_str(root.shape()));
    grads_.assign(nodes_.size(), {});
    grads_[static_cast<std::size_t>(r)].assign(1, T(1));
    for (int i = r; i >= 0; --i) {
      auto& g = grads_[static_cast<std::size_t>(i)];
      if (g.empty()) continue;
      nodes_[static_cast<std::size_t>(i)].backward(std::span<const T>(g), *this);
      std::vector<T>().swap(g);  // release as the sweep passes
    }
    grads_.clear();
  }

  // Gradient buffer of `node`, zero-initialized on first touch. Only valid
  // inside a backward sweep.
  std::span<T> grad(int node) {
    auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) g.assign(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(node)].size), T(0));
    return {g.data(), g.size()};
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<int> inputs;
    std::int64_t size = 0;
    BackwardFn backward;
  };

  int add_node(std::vector<int> inputs, std::int64_t size, BackwardFn fn) {
    nodes_.push_back(Node{std::move(inputs), size, std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
};

// Named trainable tensor.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
  // Matrices take decoupled weight decay; norm weights and embeddings do not.
  bool decay = true;
};

// Flat registry of model parameters with unique hierarchical names.
template <typename T>
class ParameterStore {
 public:
  Parameter<T>& add(std::string name, Tensor<T> tensor, bool decay = true) {
    if (index_.count(name))
      throw UsageError("parameter '" + name + "' registered twice");
    params_.push_back(Parameter<T>{name, std::move(tensor), true, decay});
    params_.back().tensor.enable_grad();
    index_[params_.back().name] = params_.size() - 1;
    return params_.back();
  }

  Parameter<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter '" + name + "'");
    return params_[it->second];
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t count() const { return params_.size(); }

  std::int64_t total_elements() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  void watch_all(Tape<T>& tape) {
    for (auto& p : params_)
      if (p.trainable) tape.watch(p.tensor);
  }

  void zero_grads() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::deque<Parameter<T>> params_;  // deque: stable addresses for modules
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace coe

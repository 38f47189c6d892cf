#pragma once

#include <algorithm>
#include <atomic>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "dalace/tensor.hpp"

namespace dalace {

// A learnable tensor with a persistent gradient accumulator. Parameters
// live in network structs; graphs reference them through leaf nodes.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void init(std::string n, Tensor<T> v) {
    name = std::move(n);
    value = std::move(v);
    grad = Tensor<T>::zeros(value.shape());
  }

  void zero_grad() { grad.fill(T(0)); }
};

// Define-by-run tape node. Creation order is a valid topological order, so
// backward() just walks reachable nodes by descending id.
template <typename T>
struct VarNode {
  Tensor<T> val;
  Tensor<T> grad;  // allocated lazily during backward
  bool needs_grad = false;
  uint64_t id = 0;
  Param<T>* sink = nullptr;
  std::vector<std::shared_ptr<VarNode<T>>> parents;
  std::function<void(VarNode<T>&)> backfn;

  void ensure_grad() {
    if (!grad.defined()) grad = Tensor<T>::zeros(val.shape());
  }
};

template <typename T>
using VarPtr = std::shared_ptr<VarNode<T>>;

inline uint64_t next_node_id() {
  static std::atomic<uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
VarPtr<T> make_node(Tensor<T> val) {
  auto n = std::make_shared<VarNode<T>>();
  n->val = std::move(val);
  n->id = next_node_id();
  return n;
}

// Constant leaf (no gradient tracking).
template <typename T>
VarPtr<T> constant(Tensor<T> v) {
  return make_node(std::move(v));
}

// Leaf whose gradient is wanted by the caller (inputs under test).
template <typename T>
VarPtr<T> input(Tensor<T> v) {
  auto n = make_node(std::move(v));
  n->needs_grad = true;
  return n;
}

// While a ParamFreeze is alive on this thread, parameter leaves are created
// as plain constants: forward values are identical but no gradients are
// tracked or accumulated for them. Used for frozen-network passes (e.g.
// adversarial updates that flow through the segmenter without training it)
// and for pure inference.
inline bool& param_grads_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct ParamFreeze {
  bool prev;
  ParamFreeze() : prev(param_grads_enabled()) { param_grads_enabled() = false; }
  ~ParamFreeze() { param_grads_enabled() = prev; }
  ParamFreeze(const ParamFreeze&) = delete;
};

// Leaf bound to a parameter: shares the value storage and accumulates its
// gradient into p.grad during backward.
template <typename T>
VarPtr<T> leaf(Param<T>& p) {
  auto n = make_node(p.value);
  if (!param_grads_enabled()) return n;
  n->needs_grad = true;
  n->sink = &p;
  n->backfn = [](VarNode<T>& self) {
    Tensor<T>& g = self.sink->grad;
    const T* src = self.grad.data();
    T* dst = g.data();
    for (int64_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
  };
  return n;
}

// Cuts the graph: same value, no history.
template <typename T>
VarPtr<T> detach(const VarPtr<T>& x) {
  return constant(x->val);
}

template <typename T>
bool any_needs_grad(std::initializer_list<const VarPtr<T>*> xs) {
  for (auto* x : xs)
    if (*x && (*x)->needs_grad) return true;
  return false;
}

// Reverse pass from a scalar root. Gradients accumulate into node->grad and,
// for parameter leaves, into Param::grad.
template <typename T>
void backward(const VarPtr<T>& root) {
  require(root->val.numel() == 1, ErrorCode::ShapeMismatch, "backward root must be scalar");
  std::vector<VarNode<T>*> order;
  std::unordered_set<VarNode<T>*> seen;
  std::vector<VarNode<T>*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    VarNode<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->needs_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const VarNode<T>* a, const VarNode<T>* b) { return a->id > b->id; });
  root->grad = Tensor<T>::full({1}, T(1));
  for (VarNode<T>* n : order) {
    if (n->needs_grad && n->backfn && n->grad.defined()) n->backfn(*n);
  }
}

}  // namespace dalace

#pragma once

// Reverse-mode differentiable tensors.
//
// A Tensor is a shared handle to a TensorImpl holding row-major values, an
// optional gradient buffer and, for op outputs, the Node that produced it.
// Nodes keep their parents alive, so the graph is owned by its outputs and
// is acyclic by construction. backward() walks the graph once and then
// releases it.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "mvgsr/error.hpp"

namespace mvgsr::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

template <typename T>
struct TensorImpl;

template <typename T>
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> parents;
  // Reads out.grad and accumulates into the parents' gradients.
  std::function<void(TensorImpl<T>& out)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::shared_ptr<Node<T>> node;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

// ---------------------------------------------------------------------------
// thread-local switches

struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Fingerprint of the branch taken at every non-smooth op (relu, abs, ...)
/// while active. grad_check compares fingerprints to detect kink crossings.
struct KinkMonitor {
  bool active = false;
  std::uint64_t hash = 1469598103934665603ull;

  static KinkMonitor& current() {
    thread_local KinkMonitor m;
    return m;
  }
  void mix(std::uint64_t bit) {
    hash ^= bit + 0x9e3779b97f4a7c15ull;
    hash *= 1099511628211ull;
  }
};

// ---------------------------------------------------------------------------

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->data.assign(numel_of(shape), T(0));
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != numel_of(shape))
      fail(Errc::ShapeMismatch, "value count " + std::to_string(values.size()) + " vs shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  std::vector<T>& values() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }
  T item() const {
    if (numel() != 1) fail(Errc::ShapeMismatch, "item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }
  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<T>& grad() const { return impl_->grad; }
  std::vector<T>& grad_mut() { return impl_->grad_buffer(); }
  void zero_grad() { impl_->grad.clear(); }
  bool is_leaf() const { return !impl_->node; }

  /// Value copy without history.
  Tensor detach() const { return from(shape(), values(), false); }

  TensorImpl<T>* get() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

// ---------------------------------------------------------------------------
// graph construction helpers used by ops

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.values())
    if (!std::isfinite(v)) fail(Errc::NonFiniteInput, std::string(op) + " received a non-finite value");
}

template <typename T>
bool needs_graph(std::initializer_list<const Tensor<T>*> inputs) {
  if (!GradMode::enabled()) return false;
  for (const auto* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

/// Allocates an op output and, when any input requires grad, attaches a node.
template <typename T>
Tensor<T> make_output(Shape shape, const char* op, const std::vector<Tensor<T>>& inputs,
                      std::function<void(TensorImpl<T>&)> backward) {
  Tensor<T> out = Tensor<T>::zeros(std::move(shape));
  bool track = GradMode::enabled();
  if (track) {
    track = false;
    for (const auto& t : inputs)
      if (t.defined() && t.requires_grad()) track = true;
  }
  if (track) {
    auto node = std::make_shared<Node<T>>();
    node->op = op;
    for (const auto& t : inputs)
      if (t.defined()) node->parents.push_back(t.impl());
    node->backward = std::move(backward);
    out.get()->node = std::move(node);
    out.get()->requires_grad = true;
  }
  return out;
}

/// Gradient buffer of `t` when it participates in backprop, else nullptr.
template <typename T>
T* grad_of(const ImplPtr<T>& t) {
  return t && t->requires_grad ? t->grad_buffer().data() : nullptr;
}

// ---------------------------------------------------------------------------

/// Populates gradients of every requires_grad tensor reachable from `loss`,
/// then releases the graph.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    fail(Errc::NonScalarLoss, "backward() needs a scalar loss, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  if (loss.get()->consumed) fail(Errc::GraphConsumed, "graph already consumed by a previous backward()");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> seen;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->consumed) fail(Errc::GraphConsumed, "graph already consumed by a previous backward()");
    if (impl->node && next < impl->node->parents.size()) {
      TensorImpl<T>* p = impl->node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  loss.get()->grad_buffer()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* impl = *it;
    if (impl->node && !impl->grad.empty()) impl->node->backward(*impl);
  }
  for (TensorImpl<T>* impl : order) {
    if (!impl->node) continue;
    impl->node.reset();
    impl->grad.clear();
    impl->grad.shrink_to_fit();
    impl->consumed = true;
  }
}

// ---------------------------------------------------------------------------
// parameters and initialization

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

/// Deterministic uniform double in [0, 1) from a 64-bit engine.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Named parameters of a model, in registration order.
template <typename T>
class ParameterStore {
 public:
  Tensor<T> add(const std::string& name, Shape shape) {
    for (const auto& p : params_)
      if (p.name == name) fail(Errc::InvalidArgument, "duplicate parameter name " + name);
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), true);
    params_.push_back({name, t});
    return t;
  }

  /// Kaiming-uniform: U(-b, b), b = sqrt(6 / fan_in).
  Tensor<T> add_kaiming(const std::string& name, Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    Tensor<T> t = add(name, std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (T& v : t.values()) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
    return t;
  }

  Tensor<T> add_constant(const std::string& name, Shape shape, T value) {
    Tensor<T> t = add(name, std::move(shape));
    std::fill(t.values().begin(), t.values().end(), value);
    return t;
  }

  std::vector<Parameter<T>>& all() { return params_; }
  const std::vector<Parameter<T>>& all() const { return params_; }

  Tensor<T> get(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.tensor;
    fail(Errc::InvalidArgument, "no parameter named " + name);
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::vector<Parameter<T>> params_;
};

}  // namespace mvgsr::ad

#include "pgd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace pgd {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_next_seq{1};

std::shared_ptr<TensorImpl> make_impl(Shape shape, DType dtype) {
  for (auto e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + to_string(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  impl->shape = std::move(shape);
  impl->dtype = dtype;
  if (dtype == DType::f32) {
    impl->storage = std::vector<float>(n, 0.0f);
  } else {
    impl->storage = std::vector<double>(n, 0.0);
  }
  return impl;
}

}  // namespace

std::string to_string(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

TensorImpl& Tensor::impl() const {
  if (!impl_) throw Error("use of undefined tensor");
  return *impl_;
}

Tensor Tensor::empty(Shape shape, DType dtype) { return Tensor(make_impl(std::move(shape), dtype)); }

Tensor Tensor::zeros(Shape shape, DType dtype) { return empty(std::move(shape), dtype); }

Tensor Tensor::ones(Shape shape, DType dtype) { return full(std::move(shape), 1.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t = empty(std::move(shape), dtype);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("from_values: shape " + to_string(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  Tensor t = empty(std::move(shape), dtype);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_values(Shape shape, std::initializer_list<double> values, DType dtype) {
  return from_values(std::move(shape), std::span<const double>(values.begin(), values.size()), dtype);
}

std::int64_t Tensor::dim(int index) const {
  const auto n = static_cast<int>(ndim());
  const int i = index < 0 ? index + n : index;
  if (i < 0 || i >= n) {
    throw ShapeError("dimension index " + std::to_string(index) + " out of range for shape " +
                     to_string(shape()));
  }
  return shape()[static_cast<std::size_t>(i)];
}

std::int64_t Tensor::numel() const { return shape_numel(shape()); }

double Tensor::at(std::int64_t flat_index) const {
  return dispatch(dtype(), [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(data<T>()[static_cast<std::size_t>(flat_index)]);
  });
}

void Tensor::set(std::int64_t flat_index, double value) {
  dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    data<T>()[static_cast<std::size_t>(flat_index)] = static_cast<T>(value);
  });
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw Error("set_requires_grad on a non-leaf tensor");
  impl().requires_grad = flag;
  return *this;
}

Tensor Tensor::grad() const { return Tensor(impl().grad); }

void Tensor::zero_grad() { impl().grad.reset(); }

void Tensor::accumulate_grad(const Tensor& g) {
  if (g.shape() != shape()) {
    throw ShapeError("gradient shape " + to_string(g.shape()) + " does not match tensor shape " +
                     to_string(shape()));
  }
  auto& slot = impl().grad;
  if (!slot) slot = make_impl(shape(), dtype());
  Tensor acc(slot);
  dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto a = acc.data<T>();
    if (g.dtype() == dtype()) {
      auto s = g.data<T>();
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += s[i];
    } else {
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += static_cast<T>(g.at(static_cast<std::int64_t>(i)));
    }
  });
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape();
  impl->dtype = dtype();
  impl->storage = this->impl().storage;
  return Tensor(impl);
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return detach();
  Tensor out = empty(shape(), target);
  dispatch(target, [&](auto tag) {
    using T = decltype(tag);
    auto d = out.data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(at(static_cast<std::int64_t>(i)));
  });
  return out;
}

Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("cannot reshape " + to_string(shape()) + " to " + to_string(new_shape));
  }
  Tensor out = detach();
  out.impl().shape = std::move(new_shape);
  return out;
}

void Tensor::check_finite(const std::string& context) const {
  dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!std::isfinite(d[i])) {
        throw NumericError(context + ": non-finite value at flat index " + std::to_string(i));
      }
    }
  });
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor record(Tensor out, std::string op, std::vector<Tensor> inputs, BackwardFn backward) {
  out.check_finite(op);
  if (!g_grad_enabled) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!needs) return out;
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->seq = g_next_seq.fetch_add(1);
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  out.raw()->grad_fn = std::move(node);
  out.raw()->requires_grad = true;
  return out;
}

namespace {

void add_into(Tensor& acc, const Tensor& g) {
  dispatch(acc.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto a = acc.data<T>();
    auto s = g.data<T>();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += s[i];
  });
}

}  // namespace

void backward(const Tensor& root) {
  if (root.numel() != 1) {
    throw ShapeError("backward requires a scalar root, got shape " + to_string(root.shape()));
  }
  Tensor seed = Tensor::ones(root.shape(), root.dtype());
  if (root.is_leaf()) {
    if (root.requires_grad()) const_cast<Tensor&>(root).accumulate_grad(seed);
    return;
  }

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.grad_fn().get()};
  seen.insert(stack.back());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (!in.defined()) continue;
      Node* child = in.grad_fn().get();
      if (child && seen.insert(child).second) stack.push_back(child);
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });

  std::unordered_map<Node*, Tensor> pending;
  pending.emplace(root.grad_fn().get(), seed);
  // Leaf contributions are summed per sweep and applied once at the end, so
  // repeating a sweep adds exactly the same tensor again.
  std::vector<std::pair<Tensor, Tensor>> leaves;
  std::unordered_map<TensorImpl*, std::size_t> leaf_slot;
  NoGradGuard no_grad;
  for (Node* n : order) {
    auto it = pending.find(n);
    if (it == pending.end()) continue;
    Tensor g = std::move(it->second);
    pending.erase(it);
    std::vector<Tensor> grads = n->backward(g);
    for (std::size_t i = 0; i < n->inputs.size() && i < grads.size(); ++i) {
      Tensor input = n->inputs[i];
      const Tensor& gi = grads[i];
      if (!gi.defined() || !input.defined() || !input.requires_grad()) continue;
      if (gi.shape() != input.shape()) {
        throw ShapeError(n->op + " backward: gradient shape " + to_string(gi.shape()) +
                         " does not match input shape " + to_string(input.shape()));
      }
      if (Node* child = input.grad_fn().get()) {
        auto [slot, inserted] = pending.try_emplace(child);
        if (inserted) {
          slot->second = gi.dtype() == input.dtype() ? gi.clone() : gi.to(input.dtype());
        } else {
          add_into(slot->second, gi.dtype() == input.dtype() ? gi : gi.to(input.dtype()));
        }
      } else {
        auto [slot, inserted] = leaf_slot.try_emplace(input.raw(), leaves.size());
        if (inserted) {
          leaves.emplace_back(input, gi.dtype() == input.dtype() ? gi.clone() : gi.to(input.dtype()));
        } else {
          add_into(leaves[slot->second].second, gi.dtype() == input.dtype() ? gi : gi.to(input.dtype()));
        }
      }
    }
  }
  for (auto& [leaf, g] : leaves) leaf.accumulate_grad(g);
}

}  // namespace pgd

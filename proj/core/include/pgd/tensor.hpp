#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "pgd/error.hpp"

namespace pgd {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

using Shape = std::vector<std::int64_t>;

std::string to_string(DType dtype);
std::string to_string(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

// Calls f(T{}) with T = float or double according to dtype.
template <class F>
decltype(auto) dispatch(DType dtype, F&& f) {
  if (dtype == DType::f32) return f(float{});
  return f(double{});
}

class Tensor;
struct Node;

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f64;
  std::variant<std::vector<float>, std::vector<double>> storage;
  bool requires_grad = false;
  std::shared_ptr<TensorImpl> grad;
  std::shared_ptr<Node> grad_fn;
};

// Dense row-major tensor with shared-handle semantics. Copying a Tensor
// copies the handle, not the data; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor empty(Shape shape, DType dtype = DType::f64);
  static Tensor zeros(Shape shape, DType dtype = DType::f64);
  static Tensor ones(Shape shape, DType dtype = DType::f64);
  static Tensor full(Shape shape, double value, DType dtype = DType::f64);
  static Tensor scalar(double value, DType dtype = DType::f64);
  static Tensor from_values(Shape shape, std::span<const double> values,
                            DType dtype = DType::f64);
  static Tensor from_values(Shape shape, std::initializer_list<double> values,
                            DType dtype = DType::f64);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t ndim() const { return impl().shape.size(); }
  // Negative indices count from the back.
  std::int64_t dim(int index) const;
  std::int64_t numel() const;
  DType dtype() const { return impl().dtype; }

  template <class T>
  std::span<T> data() {
    return std::get<std::vector<T>>(impl().storage);
  }
  template <class T>
  std::span<const T> data() const {
    return std::get<std::vector<T>>(impl().storage);
  }

  double at(std::int64_t flat_index) const;
  void set(std::int64_t flat_index, double value);
  double item() const;
  std::vector<double> to_vector() const;

  bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const { return impl().grad_fn == nullptr; }
  const std::shared_ptr<Node>& grad_fn() const { return impl().grad_fn; }

  // Accumulated gradient; undefined until a backward pass reaches this leaf.
  Tensor grad() const;
  void zero_grad();
  void accumulate_grad(const Tensor& g);

  // Same storage values, detached from the graph.
  Tensor detach() const;
  Tensor clone() const;
  Tensor to(DType dtype) const;
  Tensor reshaped(Shape shape) const;

  // Scans for NaN/Inf and throws NumericError naming `context`.
  void check_finite(const std::string& context) const;

  TensorImpl* raw() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  TensorImpl& impl() const;
  std::shared_ptr<TensorImpl> impl_;
};

// One recorded operation on the autograd tape. Node sequence numbers follow
// forward execution order; backward() visits nodes in descending order.
struct Node {
  std::string op;
  std::uint64_t seq = 0;
  std::vector<Tensor> inputs;
  BackwardFn backward;
};

bool grad_enabled();

// Disables graph recording for its lifetime (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Attaches a tape node to `out` when recording is enabled and any input
// requires a gradient. The finite check runs regardless.
Tensor record(Tensor out, std::string op, std::vector<Tensor> inputs,
              BackwardFn backward);

// Reverse-mode sweep from a scalar root. Gradients of leaves that require
// grad are accumulated with +=.
void backward(const Tensor& root);

}  // namespace pgd

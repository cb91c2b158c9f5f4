#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pgd/tensor.hpp"

// Differentiable tensor operations. Every function records a tape node when
// any input requires a gradient; all outputs are checked for NaN/Inf.
namespace pgd::ops {

// Trailing-dimension broadcast shape; throws ShapeError naming both shapes.
Shape broadcast_shape(const Shape& a, const Shape& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);
// b - a
Tensor rsub(double b, const Tensor& a);

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
// Throws DomainError identifying the first non-positive element.
Tensor log(const Tensor& a);
Tensor pow(const Tensor& a, double p);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
// max(a, lo); the gradient is zero where the floor is active.
Tensor clamp_min(const Tensor& a, double lo);

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, int axis, bool keepdim = false);
Tensor mean(const Tensor& a, int axis, bool keepdim = false);

Tensor reshape(const Tensor& a, Shape shape);

// Concatenates along the channel axis: axis 0 of C×H×W inputs, axis 1 of
// B×C×H×W inputs.
Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor slice_channels(const Tensor& a, std::int64_t start, std::int64_t count);

// Softmax across the channel axis of a B×K×H×W tensor.
Tensor softmax_channels(const Tensor& logits);

// Picks probs[b, labels[b,h,w], h, w] into a B×H×W tensor. `labels` holds
// integral class indices and is never differentiated.
Tensor gather_class(const Tensor& probs, const Tensor& labels);

// Per-sample, per-channel normalization over H×W (no affine part).
Tensor instance_norm(const Tensor& x, double eps = 1e-5);

Tensor upsample_nearest2x(const Tensor& x);

// Mean over H×W, producing B×C×1×1.
Tensor global_avg_pool(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, b); }
inline Tensor operator*(double b, const Tensor& a) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

namespace detail {
// Graph-free helpers shared by backward rules.
Tensor sum_to_shape(const Tensor& g, const Shape& target);
void require_same_dtype(const Tensor& a, const Tensor& b, const char* op);
}  // namespace detail

}  // namespace pgd::ops

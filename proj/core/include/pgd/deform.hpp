#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "pgd/tensor.hpp"

namespace pgd {

// Hyperparameters and learnable weights of one 2-D convolution. The sampling
// grid has kernel_h * kernel_w cells enumerated row-major around the kernel
// center; cell (r, s) sits at ((r - (kh-1)/2) * dilation, (s - (kw-1)/2) * dilation)
// relative to the output location's center tap.
struct ConvSpec {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  std::int64_t kernel_h = 3;
  std::int64_t kernel_w = 3;
  std::int64_t stride = 1;
  std::int64_t dilation = 1;
  std::int64_t padding = 1;
  Tensor weight;  // out × in × kh × kw
  Tensor bias;    // out, or undefined

  std::int64_t cells() const { return kernel_h * kernel_w; }
  std::int64_t out_height(std::int64_t in_height) const;
  std::int64_t out_width(std::int64_t in_width) const;
};

// Zero-initialized spec; `padding < 0` selects "same" padding dilation*(k-1)/2.
ConvSpec make_conv_spec(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel,
                        std::int64_t stride = 1, std::int64_t dilation = 1, std::int64_t padding = -1,
                        bool with_bias = true, DType dtype = DType::f64);

// Grid offsets (dy, dx) in sampling order, e.g. {(-1,-1), (-1,0), ..., (1,1)}
// for a 3×3 kernel with dilation 1.
std::vector<std::pair<std::int64_t, std::int64_t>> sampling_grid(const ConvSpec& spec);

// Per-output-location offsets and modulation masks of a deformable layer.
//   offsets: B × 2N × H_out × W_out, channel 2n is Δy and 2n+1 is Δx of cell n
//   masks:   B × N × H_out × W_out, values in [0, 1]
struct DeformField {
  Tensor offsets;
  Tensor masks;
};

// Samples a C×H×W map at the real point (py, px) held in a length-2 tensor.
// Neighbours outside the map contribute zero. Differentiable in both inputs.
Tensor bilinear_sample(const Tensor& x, const Tensor& point);

// Standard convolution over B×C×H×W input.
Tensor conv2d(const Tensor& x, const ConvSpec& spec);

// Modulated deformable convolution: every grid cell n of output location p0
// samples x at p0 + p_n + Δp_n by bilinear interpolation and scales the
// sample by m_n before weighting. Differentiable in x, weight, bias,
// offsets and masks.
Tensor deform_conv2d(const Tensor& x, const DeformField& field, const ConvSpec& spec);

// Shape an offset/mask branch must produce for `deform` applied to an
// input of spatial size height × width.
Shape expected_offset_shape(const ConvSpec& deform, std::int64_t batch, std::int64_t height, std::int64_t width);
Shape expected_mask_shape(const ConvSpec& deform, std::int64_t batch, std::int64_t height, std::int64_t width);

// Zero-initialized convolution producing 3N channels with the same kernel,
// stride, dilation and padding as `deform`.
ConvSpec make_offset_mask_branch(std::int64_t guide_channels, const ConvSpec& deform);

// Runs the branch convolution on `guide`; the first 2N channels are raw
// offsets and the last N pass through a sigmoid to become masks.
DeformField offset_mask_branch(const Tensor& guide, const ConvSpec& branch);

}  // namespace pgd

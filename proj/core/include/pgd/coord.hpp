#pragma once

#include <cstdint>

#include "pgd/tensor.hpp"

namespace pgd {

// Appends an X channel (2j/(W-1) - 1 at column j) and a Y channel
// (2i/(H-1) - 1 at row i) to a B×C×H×W map. A unit extent yields zeros.
Tensor add_coord(const Tensor& x);

struct CoordPoolOutput {
  Tensor pooled;  // B × C × H/s × W/s
  // B × 2C × H/s × W/s: X of every input channel, then Y of every input
  // channel. Local position of the maximum inside its pooling region,
  // normalized to [-1, 1]. Carries no gradient.
  Tensor coords;
};

// Max pooling that also reports where each maximum sits in its region.
// Ties resolve to the first element in row-major order. Requires
// (H - kernel) and (W - kernel) to be divisible by stride.
CoordPoolOutput coord_pool(const Tensor& x, std::int64_t kernel = 2, std::int64_t stride = 2);

}  // namespace pgd

#include "pgd/coord.hpp"

#include <string>
#include <vector>

#include "pgd/ops.hpp"

namespace pgd {

namespace {

double normalized(std::int64_t index, std::int64_t extent) {
  if (extent <= 1) return 0.0;
  return 2.0 * static_cast<double>(index) / static_cast<double>(extent - 1) - 1.0;
}

}  // namespace

Tensor add_coord(const Tensor& x) {
  if (x.ndim() != 4) throw ShapeError("add_coord: expected B×C×H×W, got " + to_string(x.shape()));
  const auto B = x.dim(0), H = x.dim(2), W = x.dim(3);
  Tensor coords = Tensor::empty({B, 2, H, W}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pc = coords.data<T>();
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j) {
          pc[static_cast<std::size_t>(((b * 2 + 0) * H + i) * W + j)] = static_cast<T>(normalized(j, W));
          pc[static_cast<std::size_t>(((b * 2 + 1) * H + i) * W + j)] = static_cast<T>(normalized(i, H));
        }
  });
  return ops::concat_channels({x, coords});
}

CoordPoolOutput coord_pool(const Tensor& x, std::int64_t kernel, std::int64_t stride) {
  if (x.ndim() != 4) throw ShapeError("coord_pool: expected B×C×H×W, got " + to_string(x.shape()));
  if (kernel < 1 || stride < 1) throw ShapeError("coord_pool: kernel and stride must be positive");
  const auto B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  for (auto extent : {H, W}) {
    if (extent < kernel || (extent - kernel) % stride != 0) {
      throw ShapeError("coord_pool: extent " + std::to_string(extent) + " is not divisible by stride " +
                       std::to_string(stride) + " (kernel " + std::to_string(kernel) + ", no padding)");
    }
  }
  const std::int64_t Ho = (H - kernel) / stride + 1;
  const std::int64_t Wo = (W - kernel) / stride + 1;
  const std::int64_t Po = Ho * Wo;
  Tensor pooled = Tensor::empty({B, C, Ho, Wo}, x.dtype());
  Tensor coords = Tensor::empty({B, 2 * C, Ho, Wo}, x.dtype());
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(B * C * Po));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto pp = pooled.data<T>();
    auto pc = coords.data<T>();
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t c = 0; c < C; ++c) {
        const std::int64_t plane = (b * C + c) * H * W;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            std::int64_t best_r = 0, best_s = 0;
            T best = px[static_cast<std::size_t>(plane + (oh * stride) * W + ow * stride)];
            for (std::int64_t r = 0; r < kernel; ++r)
              for (std::int64_t s = 0; s < kernel; ++s) {
                const T v = px[static_cast<std::size_t>(plane + (oh * stride + r) * W + ow * stride + s)];
                if (v > best) {
                  best = v;
                  best_r = r;
                  best_s = s;
                }
              }
            const std::int64_t o = oh * Wo + ow;
            pp[static_cast<std::size_t>((b * C + c) * Po + o)] = best;
            argmax[static_cast<std::size_t>((b * C + c) * Po + o)] =
                plane + (oh * stride + best_r) * W + ow * stride + best_s;
            pc[static_cast<std::size_t>((b * 2 * C + c) * Po + o)] = static_cast<T>(normalized(best_s, kernel));
            pc[static_cast<std::size_t>((b * 2 * C + C + c) * Po + o)] = static_cast<T>(normalized(best_r, kernel));
          }
        }
      }
    }
  });
  const Shape sx = x.shape();
  pooled = record(pooled, "coord_pool", {x}, [sx, argmax](const Tensor& g) {
    Tensor gx = Tensor::zeros(sx, g.dtype());
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pg = g.data<T>();
      auto po = gx.data<T>();
      for (std::size_t i = 0; i < argmax.size(); ++i) po[static_cast<std::size_t>(argmax[i])] += pg[i];
    });
    return std::vector<Tensor>{gx};
  });
  return {pooled, coords};
}

}  // namespace pgd

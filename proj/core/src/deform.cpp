#include "pgd/deform.hpp"

#include <Eigen/Core>
#include <cmath>
#include <string>

#include "pgd/ops.hpp"

namespace pgd {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Geometry {
  std::int64_t B, C, H, W, Ho, Wo, Co, kh, kw, N, stride, dil, pad;
  std::int64_t P() const { return Ho * Wo; }
  std::int64_t K() const { return C * N; }
};

Geometry geometry(const Tensor& x, const ConvSpec& spec, const char* op) {
  if (x.ndim() != 4) throw ShapeError(std::string(op) + ": expected B×C×H×W input, got " + to_string(x.shape()));
  if (x.dim(1) != spec.in_channels) {
    throw ShapeError(std::string(op) + ": input has " + std::to_string(x.dim(1)) + " channels, spec expects " +
                     std::to_string(spec.in_channels));
  }
  const Shape wshape{spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w};
  if (!spec.weight.defined() || spec.weight.shape() != wshape) {
    throw ShapeError(std::string(op) + ": weight must have shape " + to_string(wshape));
  }
  if (x.dtype() != spec.weight.dtype()) throw ShapeError(std::string(op) + ": input/weight dtype mismatch");
  if (spec.bias.defined() && (spec.bias.shape() != Shape{spec.out_channels} || spec.bias.dtype() != x.dtype())) {
    throw ShapeError(std::string(op) + ": bias must have shape [" + std::to_string(spec.out_channels) + "]");
  }
  Geometry g{};
  g.B = x.dim(0);
  g.C = x.dim(1);
  g.H = x.dim(2);
  g.W = x.dim(3);
  g.Ho = spec.out_height(g.H);
  g.Wo = spec.out_width(g.W);
  g.Co = spec.out_channels;
  g.kh = spec.kernel_h;
  g.kw = spec.kernel_w;
  g.N = spec.cells();
  g.stride = spec.stride;
  g.dil = spec.dilation;
  g.pad = spec.padding;
  return g;
}

// Integer lattice cell containing a real sampling point. The derivative of
// the interpolant at lattice points is taken from within this cell.
template <class T>
struct Corner {
  std::int64_t y0;
  std::int64_t x0;
  T ly;
  T lx;
};

template <class T>
Corner<T> corner_of(T py, T px) {
  const T fy = std::floor(py);
  const T fx = std::floor(px);
  return {static_cast<std::int64_t>(fy), static_cast<std::int64_t>(fx), py - fy, px - fx};
}

template <class T>
struct Neighbourhood {
  T v[4];  // (y0,x0), (y0,x0+1), (y0+1,x0), (y0+1,x0+1); zero outside
};

template <class T>
Neighbourhood<T> gather(const T* plane, std::int64_t H, std::int64_t W, const Corner<T>& k) {
  Neighbourhood<T> nb{{T(0), T(0), T(0), T(0)}};
  const bool y0 = k.y0 >= 0 && k.y0 < H;
  const bool y1 = k.y0 + 1 >= 0 && k.y0 + 1 < H;
  const bool x0 = k.x0 >= 0 && k.x0 < W;
  const bool x1 = k.x0 + 1 >= 0 && k.x0 + 1 < W;
  if (y0 && x0) nb.v[0] = plane[k.y0 * W + k.x0];
  if (y0 && x1) nb.v[1] = plane[k.y0 * W + k.x0 + 1];
  if (y1 && x0) nb.v[2] = plane[(k.y0 + 1) * W + k.x0];
  if (y1 && x1) nb.v[3] = plane[(k.y0 + 1) * W + k.x0 + 1];
  return nb;
}

template <class T>
T interpolate(const Neighbourhood<T>& nb, const Corner<T>& k) {
  const T hy = T(1) - k.ly;
  const T hx = T(1) - k.lx;
  return hy * hx * nb.v[0] + hy * k.lx * nb.v[1] + k.ly * hx * nb.v[2] + k.ly * k.lx * nb.v[3];
}

template <class T>
T d_dy(const Neighbourhood<T>& nb, const Corner<T>& k) {
  return (T(1) - k.lx) * (nb.v[2] - nb.v[0]) + k.lx * (nb.v[3] - nb.v[1]);
}

template <class T>
T d_dx(const Neighbourhood<T>& nb, const Corner<T>& k) {
  return (T(1) - k.ly) * (nb.v[1] - nb.v[0]) + k.ly * (nb.v[3] - nb.v[2]);
}

// Adds `g` times the interpolation weights into the in-bounds neighbours.
template <class T>
void scatter(T* plane, std::int64_t H, std::int64_t W, const Corner<T>& k, T g) {
  const T hy = T(1) - k.ly;
  const T hx = T(1) - k.lx;
  const bool y0 = k.y0 >= 0 && k.y0 < H;
  const bool y1 = k.y0 + 1 >= 0 && k.y0 + 1 < H;
  const bool x0 = k.x0 >= 0 && k.x0 < W;
  const bool x1 = k.x0 + 1 >= 0 && k.x0 + 1 < W;
  if (y0 && x0) plane[k.y0 * W + k.x0] += g * hy * hx;
  if (y0 && x1) plane[k.y0 * W + k.x0 + 1] += g * hy * k.lx;
  if (y1 && x0) plane[(k.y0 + 1) * W + k.x0] += g * k.ly * hx;
  if (y1 && x1) plane[(k.y0 + 1) * W + k.x0 + 1] += g * k.ly * k.lx;
}

// Flat indices and weights of the four bilinear neighbours of one sampling
// point. Neighbours outside the map get index 0 and weight 0, so kernels
// loop over channels without bounds checks. wy/wx are the weights of the
// interpolant's derivative in y and x.
template <class T>
struct Taps {
  std::int64_t idx[4];
  T w[4];
  T wy[4];
  T wx[4];
};

template <class T>
Taps<T> taps_of(const Corner<T>& k, std::int64_t H, std::int64_t W) {
  const T hy = T(1) - k.ly;
  const T hx = T(1) - k.lx;
  const bool in_y[2] = {k.y0 >= 0 && k.y0 < H, k.y0 + 1 >= 0 && k.y0 + 1 < H};
  const bool in_x[2] = {k.x0 >= 0 && k.x0 < W, k.x0 + 1 >= 0 && k.x0 + 1 < W};
  const T w[4] = {hy * hx, hy * k.lx, k.ly * hx, k.ly * k.lx};
  const T wy[4] = {-hx, -k.lx, hx, k.lx};
  const T wx[4] = {-hy, hy, -k.ly, k.ly};
  Taps<T> t{};
  for (int q = 0; q < 4; ++q) {
    const int dy = q / 2, dx = q % 2;
    const bool ok = in_y[dy] && in_x[dx];
    t.idx[q] = ok ? (k.y0 + dy) * W + k.x0 + dx : 0;
    t.w[q] = ok ? w[q] : T(0);
    t.wy[q] = ok ? wy[q] : T(0);
    t.wx[q] = ok ? wx[q] : T(0);
  }
  return t;
}

template <class T>
void im2col(const T* x, const Geometry& g, T* col) {
  const std::int64_t P = g.P();
  for (std::int64_t c = 0; c < g.C; ++c) {
    const T* plane = x + c * g.H * g.W;
    for (std::int64_t r = 0; r < g.kh; ++r) {
      for (std::int64_t s = 0; s < g.kw; ++s) {
        T* row = col + ((c * g.kh + r) * g.kw + s) * P;
        for (std::int64_t oh = 0; oh < g.Ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + r * g.dil;
          T* out = row + oh * g.Wo;
          if (ih < 0 || ih >= g.H) {
            std::fill(out, out + g.Wo, T(0));
            continue;
          }
          for (std::int64_t ow = 0; ow < g.Wo; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + s * g.dil;
            out[ow] = (iw >= 0 && iw < g.W) ? plane[ih * g.W + iw] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, const Geometry& g, T* dx) {
  const std::int64_t P = g.P();
  for (std::int64_t c = 0; c < g.C; ++c) {
    T* plane = dx + c * g.H * g.W;
    for (std::int64_t r = 0; r < g.kh; ++r) {
      for (std::int64_t s = 0; s < g.kw; ++s) {
        const T* row = col + ((c * g.kh + r) * g.kw + s) * P;
        for (std::int64_t oh = 0; oh < g.Ho; ++oh) {
          const std::int64_t ih = oh * g.stride - g.pad + r * g.dil;
          if (ih < 0 || ih >= g.H) continue;
          for (std::int64_t ow = 0; ow < g.Wo; ++ow) {
            const std::int64_t iw = ow * g.stride - g.pad + s * g.dil;
            if (iw >= 0 && iw < g.W) plane[ih * g.W + iw] += row[oh * g.Wo + ow];
          }
        }
      }
    }
  }
}

// Sampling taps of one batch element: taps[n * P + p].
template <class T>
std::vector<Taps<T>> deform_taps(const T* offsets, const Geometry& g) {
  const std::int64_t P = g.P();
  std::vector<Taps<T>> taps(static_cast<std::size_t>(g.N * P));
  for (std::int64_t r = 0; r < g.kh; ++r) {
    for (std::int64_t s = 0; s < g.kw; ++s) {
      const std::int64_t n = r * g.kw + s;
      const T* off_y = offsets + (2 * n) * P;
      const T* off_x = offsets + (2 * n + 1) * P;
      for (std::int64_t oh = 0; oh < g.Ho; ++oh) {
        for (std::int64_t ow = 0; ow < g.Wo; ++ow) {
          const std::int64_t p = oh * g.Wo + ow;
          const T py = static_cast<T>(oh * g.stride - g.pad + r * g.dil) + off_y[p];
          const T px = static_cast<T>(ow * g.stride - g.pad + s * g.dil) + off_x[p];
          taps[static_cast<std::size_t>(n * P + p)] = taps_of(corner_of(py, px), g.H, g.W);
        }
      }
    }
  }
  return taps;
}

// Unmodulated samples: vals[(c * N + n) * P + p].
template <class T>
void deform_sample(const T* x, const Geometry& g, const std::vector<Taps<T>>& taps, T* vals) {
  const std::int64_t P = g.P();
  for (std::int64_t c = 0; c < g.C; ++c) {
    const T* plane = x + c * g.H * g.W;
    for (std::int64_t n = 0; n < g.N; ++n) {
      T* row = vals + (c * g.N + n) * P;
      const Taps<T>* t = taps.data() + n * P;
      for (std::int64_t p = 0; p < P; ++p) {
        const Taps<T>& k = t[p];
        row[p] = k.w[0] * plane[k.idx[0]] + k.w[1] * plane[k.idx[1]] + k.w[2] * plane[k.idx[2]] +
                 k.w[3] * plane[k.idx[3]];
      }
    }
  }
}

template <class T>
void add_bias(Eigen::Map<RowMat<T>>& y, const Tensor& bias) {
  if (!bias.defined()) return;
  auto b = bias.data<T>();
  for (Eigen::Index o = 0; o < y.rows(); ++o) y.row(o).array() += b[static_cast<std::size_t>(o)];
}

template <class T>
Tensor bias_grad(const Tensor& g, const Geometry& geo) {
  Tensor gb = Tensor::zeros({geo.Co}, g.dtype());
  auto pg = g.data<T>();
  auto pb = gb.data<T>();
  const std::int64_t P = geo.P();
  for (std::int64_t b = 0; b < geo.B; ++b)
    for (std::int64_t o = 0; o < geo.Co; ++o) {
      T acc = 0;
      const T* row = pg.data() + (b * geo.Co + o) * P;
      for (std::int64_t p = 0; p < P; ++p) acc += row[p];
      pb[static_cast<std::size_t>(o)] += acc;
    }
  return gb;
}

}  // namespace

std::int64_t ConvSpec::out_height(std::int64_t in_height) const {
  const std::int64_t span = in_height + 2 * padding - dilation * (kernel_h - 1) - 1;
  if (span < 0 || stride < 1) {
    throw ShapeError("convolution output height is empty for input height " + std::to_string(in_height));
  }
  return span / stride + 1;
}

std::int64_t ConvSpec::out_width(std::int64_t in_width) const {
  const std::int64_t span = in_width + 2 * padding - dilation * (kernel_w - 1) - 1;
  if (span < 0 || stride < 1) {
    throw ShapeError("convolution output width is empty for input width " + std::to_string(in_width));
  }
  return span / stride + 1;
}

ConvSpec make_conv_spec(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel,
                        std::int64_t stride, std::int64_t dilation, std::int64_t padding, bool with_bias,
                        DType dtype) {
  ConvSpec spec;
  spec.in_channels = in_channels;
  spec.out_channels = out_channels;
  spec.kernel_h = kernel;
  spec.kernel_w = kernel;
  spec.stride = stride;
  spec.dilation = dilation;
  spec.padding = padding < 0 ? dilation * (kernel - 1) / 2 : padding;
  spec.weight = Tensor::zeros({out_channels, in_channels, kernel, kernel}, dtype);
  if (with_bias) spec.bias = Tensor::zeros({out_channels}, dtype);
  return spec;
}

std::vector<std::pair<std::int64_t, std::int64_t>> sampling_grid(const ConvSpec& spec) {
  std::vector<std::pair<std::int64_t, std::int64_t>> grid;
  for (std::int64_t r = 0; r < spec.kernel_h; ++r)
    for (std::int64_t s = 0; s < spec.kernel_w; ++s)
      grid.emplace_back((r - (spec.kernel_h - 1) / 2) * spec.dilation, (s - (spec.kernel_w - 1) / 2) * spec.dilation);
  return grid;
}

Tensor bilinear_sample(const Tensor& x, const Tensor& point) {
  if (x.ndim() != 3) throw ShapeError("bilinear_sample: expected C×H×W map, got " + to_string(x.shape()));
  if (point.numel() != 2) throw ShapeError("bilinear_sample: point must hold (py, px)");
  ops::detail::require_same_dtype(x, point, "bilinear_sample");
  const auto C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor out = Tensor::empty({C}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto k = corner_of(point.data<T>()[0], point.data<T>()[1]);
    auto px = x.data<T>();
    auto po = out.data<T>();
    for (std::int64_t c = 0; c < C; ++c) {
      po[static_cast<std::size_t>(c)] = interpolate(gather(px.data() + c * H * W, H, W, k), k);
    }
  });
  return record(out, "bilinear_sample", {x, point}, [x, point, C, H, W](const Tensor& g) {
    Tensor gx = Tensor::zeros(x.shape(), x.dtype());
    Tensor gp = Tensor::zeros(point.shape(), x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const auto k = corner_of(point.data<T>()[0], point.data<T>()[1]);
      auto px = x.data<T>();
      auto pg = g.data<T>();
      auto pgx = gx.data<T>();
      T dy = 0, dx = 0;
      for (std::int64_t c = 0; c < C; ++c) {
        const T gc = pg[static_cast<std::size_t>(c)];
        const auto nb = gather(px.data() + c * H * W, H, W, k);
        dy += gc * d_dy(nb, k);
        dx += gc * d_dx(nb, k);
        scatter(pgx.data() + c * H * W, H, W, k, gc);
      }
      gp.data<T>()[0] = dy;
      gp.data<T>()[1] = dx;
    });
    return std::vector<Tensor>{gx, gp};
  });
}

Tensor conv2d(const Tensor& x, const ConvSpec& spec) {
  const Geometry geo = geometry(x, spec, "conv2d");
  Tensor out = Tensor::empty({geo.B, geo.Co, geo.Ho, geo.Wo}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const std::int64_t P = geo.P(), K = geo.K();
    RowMat<T> col(K, P);
    Eigen::Map<const RowMat<T>> w(spec.weight.data<T>().data(), geo.Co, K);
    for (std::int64_t b = 0; b < geo.B; ++b) {
      im2col(x.data<T>().data() + b * geo.C * geo.H * geo.W, geo, col.data());
      Eigen::Map<RowMat<T>> y(out.data<T>().data() + b * geo.Co * P, geo.Co, P);
      y.noalias() = w * col;
      add_bias(y, spec.bias);
    }
  });
  Tensor weight = spec.weight;
  Tensor bias = spec.bias;
  return record(out, "conv2d", {x, weight, bias}, [x, weight, bias, geo](const Tensor& g) {
    Tensor gx = Tensor::zeros(x.shape(), x.dtype());
    Tensor gw = Tensor::zeros(weight.shape(), x.dtype());
    Tensor gb;
    dispatch(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const std::int64_t P = geo.P(), K = geo.K();
      Eigen::Map<const RowMat<T>> w(weight.data<T>().data(), geo.Co, K);
      Eigen::Map<RowMat<T>> dw(gw.data<T>().data(), geo.Co, K);
      RowMat<T> col(K, P);
      RowMat<T> dcol(K, P);
      for (std::int64_t b = 0; b < geo.B; ++b) {
        Eigen::Map<const RowMat<T>> dy(g.data<T>().data() + b * geo.Co * P, geo.Co, P);
        if (weight.requires_grad()) {
          im2col(x.data<T>().data() + b * geo.C * geo.H * geo.W, geo, col.data());
          dw.noalias() += dy * col.transpose();
        }
        if (x.requires_grad()) {
          dcol.noalias() = w.transpose() * dy;
          col2im(dcol.data(), geo, gx.data<T>().data() + b * geo.C * geo.H * geo.W);
        }
      }
      if (bias.defined() && bias.requires_grad()) gb = bias_grad<T>(g, geo);
    });
    return std::vector<Tensor>{gx, gw, gb};
  });
}

Shape expected_offset_shape(const ConvSpec& deform, std::int64_t batch, std::int64_t height, std::int64_t width) {
  return {batch, 2 * deform.cells(), deform.out_height(height), deform.out_width(width)};
}

Shape expected_mask_shape(const ConvSpec& deform, std::int64_t batch, std::int64_t height, std::int64_t width) {
  return {batch, deform.cells(), deform.out_height(height), deform.out_width(width)};
}

Tensor deform_conv2d(const Tensor& x, const DeformField& field, const ConvSpec& spec) {
  const Geometry geo = geometry(x, spec, "deform_conv2d");
  const Shape off_shape = expected_offset_shape(spec, geo.B, geo.H, geo.W);
  const Shape mask_shape = expected_mask_shape(spec, geo.B, geo.H, geo.W);
  if (!field.offsets.defined() || field.offsets.shape() != off_shape) {
    throw ShapeError("deform_conv2d: offsets must have shape " + to_string(off_shape) + ", got " +
                     (field.offsets.defined() ? to_string(field.offsets.shape()) : std::string("none")));
  }
  if (!field.masks.defined() || field.masks.shape() != mask_shape) {
    throw ShapeError("deform_conv2d: masks must have shape " + to_string(mask_shape) + ", got " +
                     (field.masks.defined() ? to_string(field.masks.shape()) : std::string("none")));
  }
  ops::detail::require_same_dtype(x, field.offsets, "deform_conv2d");
  ops::detail::require_same_dtype(x, field.masks, "deform_conv2d");

  Tensor out = Tensor::empty({geo.B, geo.Co, geo.Ho, geo.Wo}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const std::int64_t P = geo.P(), K = geo.K();
    RowMat<T> col(K, P);
    Eigen::Map<const RowMat<T>> w(spec.weight.data<T>().data(), geo.Co, K);
    for (std::int64_t b = 0; b < geo.B; ++b) {
      const auto taps = deform_taps(field.offsets.data<T>().data() + b * 2 * geo.N * P, geo);
      deform_sample(x.data<T>().data() + b * geo.C * geo.H * geo.W, geo, taps, col.data());
      const T* m = field.masks.data<T>().data() + b * geo.N * P;
      for (std::int64_t c = 0; c < geo.C; ++c)
        for (std::int64_t n = 0; n < geo.N; ++n) col.row(c * geo.N + n).array() *= Eigen::Map<const Eigen::Array<T, 1, Eigen::Dynamic>>(m + n * P, P);
      Eigen::Map<RowMat<T>> y(out.data<T>().data() + b * geo.Co * P, geo.Co, P);
      y.noalias() = w * col;
      add_bias(y, spec.bias);
    }
  });

  Tensor weight = spec.weight;
  Tensor bias = spec.bias;
  Tensor offsets = field.offsets;
  Tensor masks = field.masks;
  return record(out, "deform_conv2d", {x, weight, bias, offsets, masks},
                [x, weight, bias, offsets, masks, geo](const Tensor& g) {
    Tensor gx = Tensor::zeros(x.shape(), x.dtype());
    Tensor gw = Tensor::zeros(weight.shape(), x.dtype());
    Tensor goff = Tensor::zeros(offsets.shape(), x.dtype());
    Tensor gm = Tensor::zeros(masks.shape(), x.dtype());
    Tensor gb;
    dispatch(x.dtype(), [&](auto tag) {
      using T = decltype(tag);
      const std::int64_t P = geo.P(), K = geo.K(), HW = geo.H * geo.W;
      Eigen::Map<const RowMat<T>> w(weight.data<T>().data(), geo.Co, K);
      Eigen::Map<RowMat<T>> dw(gw.data<T>().data(), geo.Co, K);
      RowMat<T> vals(K, P);
      RowMat<T> dcol(K, P);
      for (std::int64_t b = 0; b < geo.B; ++b) {
        const T* xb = x.data<T>().data() + b * geo.C * HW;
        const T* m = masks.data<T>().data() + b * geo.N * P;
        const auto taps = deform_taps(offsets.data<T>().data() + b * 2 * geo.N * P, geo);
        deform_sample(xb, geo, taps, vals.data());
        Eigen::Map<const RowMat<T>> dy(g.data<T>().data() + b * geo.Co * P, geo.Co, P);
        if (weight.requires_grad()) {
          RowMat<T> col = vals;
          for (std::int64_t c = 0; c < geo.C; ++c)
            for (std::int64_t n = 0; n < geo.N; ++n)
              col.row(c * geo.N + n).array() *= Eigen::Map<const Eigen::Array<T, 1, Eigen::Dynamic>>(m + n * P, P);
          dw.noalias() += dy * col.transpose();
        }
        dcol.noalias() = w.transpose() * dy;
        T* gxb = gx.data<T>().data() + b * geo.C * HW;
        T* goffb = goff.data<T>().data() + b * 2 * geo.N * P;
        T* gmb = gm.data<T>().data() + b * geo.N * P;
        for (std::int64_t c = 0; c < geo.C; ++c) {
          const T* plane = xb + c * HW;
          T* gplane = gxb + c * HW;
          for (std::int64_t n = 0; n < geo.N; ++n) {
            const T* drow = dcol.data() + (c * geo.N + n) * P;
            const T* vrow = vals.data() + (c * geo.N + n) * P;
            const Taps<T>* kt = taps.data() + n * P;
            T* goff_y = goffb + (2 * n) * P;
            T* goff_x = goffb + (2 * n + 1) * P;
            T* gmask = gmb + n * P;
            const T* mrow = m + n * P;
            for (std::int64_t p = 0; p < P; ++p) {
              const T d = drow[p];
              gmask[p] += d * vrow[p];
              const T dm = d * mrow[p];
              const Taps<T>& k = kt[p];
              const T v[4] = {plane[k.idx[0]], plane[k.idx[1]], plane[k.idx[2]], plane[k.idx[3]]};
              goff_y[p] += dm * (k.wy[0] * v[0] + k.wy[1] * v[1] + k.wy[2] * v[2] + k.wy[3] * v[3]);
              goff_x[p] += dm * (k.wx[0] * v[0] + k.wx[1] * v[1] + k.wx[2] * v[2] + k.wx[3] * v[3]);
              for (int q = 0; q < 4; ++q) gplane[k.idx[q]] += dm * k.w[q];
            }
          }
        }
      }
      if (bias.defined() && bias.requires_grad()) gb = bias_grad<T>(g, geo);
    });
    return std::vector<Tensor>{gx, gw, gb, goff, gm};
  });
}

ConvSpec make_offset_mask_branch(std::int64_t guide_channels, const ConvSpec& deform) {
  ConvSpec branch = make_conv_spec(guide_channels, 3 * deform.cells(), deform.kernel_h, deform.stride,
                                   deform.dilation, deform.padding, true, deform.weight.defined() ? deform.weight.dtype() : DType::f64);
  branch.kernel_w = deform.kernel_w;
  branch.weight = Tensor::zeros({branch.out_channels, guide_channels, deform.kernel_h, deform.kernel_w},
                                branch.weight.dtype());
  return branch;
}

DeformField offset_mask_branch(const Tensor& guide, const ConvSpec& branch) {
  if (branch.out_channels % 3 != 0 || branch.out_channels / 3 != branch.cells()) {
    throw ShapeError("offset_mask_branch: branch must produce 3*" + std::to_string(branch.cells()) +
                     " channels, has " + std::to_string(branch.out_channels));
  }
  const std::int64_t n = branch.cells();
  Tensor raw = conv2d(guide, branch);
  return {ops::slice_channels(raw, 0, 2 * n), ops::sigmoid(ops::slice_channels(raw, 2 * n, n))};
}

}  // namespace pgd

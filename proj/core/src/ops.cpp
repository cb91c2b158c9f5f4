#include "pgd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace pgd::ops {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Strides of `in` aligned to the trailing dims of `out`; 0 on broadcast dims.
std::vector<std::int64_t> aligned_strides(const Shape& in, const Shape& out) {
  std::vector<std::int64_t> s(out.size(), 0);
  std::int64_t stride = 1;
  auto j = static_cast<std::ptrdiff_t>(out.size()) - 1;
  for (auto i = static_cast<std::ptrdiff_t>(in.size()) - 1; i >= 0; --i, --j) {
    const auto e = in[static_cast<std::size_t>(i)];
    s[static_cast<std::size_t>(j)] = e == 1 ? 0 : stride;
    stride *= e;
  }
  return s;
}

// Calls f(out_index, a_index, b_index) over the broadcast iteration space.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa,
                        const std::vector<std::int64_t>& sb, F&& f) {
  const std::size_t nd = out.size();
  const std::int64_t n = shape_numel(out);
  std::vector<std::int64_t> ctr(nd, 0);
  std::int64_t ia = 0;
  std::int64_t ib = 0;
  for (std::int64_t k = 0; k < n; ++k) {
    f(k, ia, ib);
    for (std::size_t d = nd; d-- > 0;) {
      ++ctr[d];
      ia += sa[d];
      ib += sb[d];
      if (ctr[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      ctr[d] = 0;
    }
  }
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor out = Tensor::empty(out_shape, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pa = a.data<T>();
    auto pb = b.data<T>();
    auto po = out.data<T>();
    if (a.shape() == b.shape()) {
      for (std::size_t i = 0; i < po.size(); ++i) po[i] = f(pa[i], pb[i]);
    } else if (b.numel() == 1 && a.shape() == out_shape) {
      const T y = pb[0];
      for (std::size_t i = 0; i < po.size(); ++i) po[i] = f(pa[i], y);
    } else if (a.numel() == 1 && b.shape() == out_shape) {
      const T x = pa[0];
      for (std::size_t i = 0; i < po.size(); ++i) po[i] = f(x, pb[i]);
    } else {
      for_each_broadcast(out_shape, aligned_strides(a.shape(), out_shape),
                         aligned_strides(b.shape(), out_shape),
                         [&](std::int64_t k, std::int64_t ia, std::int64_t ib) {
                           po[static_cast<std::size_t>(k)] =
                               f(pa[static_cast<std::size_t>(ia)], pb[static_cast<std::size_t>(ib)]);
                         });
    }
  });
  return out;
}

template <class F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out = Tensor::empty(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pa = a.data<T>();
    auto po = out.data<T>();
    for (std::size_t i = 0; i < po.size(); ++i) po[i] = f(pa[i]);
  });
  return out;
}

struct Plus {
  template <class T>
  T operator()(T x, T y) const { return x + y; }
};
struct Times {
  template <class T>
  T operator()(T x, T y) const { return x * y; }
};

int channel_axis(const Tensor& t, const char* op) {
  if (t.ndim() == 4) return 1;
  if (t.ndim() == 3) return 0;
  throw ShapeError(std::string(op) + ": expected C×H×W or B×C×H×W, got " + to_string(t.shape()));
}

void require_4d(const Tensor& t, const char* op) {
  if (t.ndim() != 4) {
    throw ShapeError(std::string(op) + ": expected B×C×H×W, got " + to_string(t.shape()));
  }
}

}  // namespace

namespace detail {

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ShapeError(std::string(op) + ": dtype mismatch " + to_string(a.dtype()) + " vs " +
                     to_string(b.dtype()));
  }
}

Tensor sum_to_shape(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  Tensor out = Tensor::zeros(target, g.dtype());
  dispatch(g.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pg = g.data<T>();
    auto po = out.data<T>();
    if (shape_numel(target) == 1) {
      T acc = 0;
      for (auto v : pg) acc += v;
      po[0] = acc;
      return;
    }
    const auto st = aligned_strides(target, g.shape());
    const std::vector<std::int64_t> unit(g.shape().size(), 0);
    for_each_broadcast(g.shape(), st, unit, [&](std::int64_t k, std::int64_t it, std::int64_t) {
      po[static_cast<std::size_t>(it)] += pg[static_cast<std::size_t>(k)];
    });
  });
  return out;
}

}  // namespace detail

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (std::size_t k = 0; k < nd; ++k) {
    const std::int64_t ea = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::int64_t eb = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("shapes " + to_string(a) + " and " + to_string(b) + " are not broadcastable");
    }
    out[nd - 1 - k] = ea == 1 ? eb : ea;
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_dtype(a, b, "add");
  Tensor out = map_binary(a, b, Plus{});
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  return record(out, "add", {a, b}, [sa, sb](const Tensor& g) {
    return std::vector<Tensor>{detail::sum_to_shape(g, sa), detail::sum_to_shape(g, sb)};
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_dtype(a, b, "sub");
  Tensor out = map_binary(a, b, [](auto x, auto y) { return x - y; });
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  return record(out, "sub", {a, b}, [sa, sb](const Tensor& g) {
    Tensor gb = detail::sum_to_shape(map_unary(g, [](auto v) { return -v; }), sb);
    return std::vector<Tensor>{detail::sum_to_shape(g, sa), gb};
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_dtype(a, b, "mul");
  Tensor out = map_binary(a, b, Times{});
  return record(out, "mul", {a, b}, [a, b](const Tensor& g) {
    Tensor ga = a.requires_grad() ? detail::sum_to_shape(map_binary(g, b, Times{}), a.shape()) : Tensor();
    Tensor gb = b.requires_grad() ? detail::sum_to_shape(map_binary(g, a, Times{}), b.shape()) : Tensor();
    return std::vector<Tensor>{ga, gb};
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_dtype(a, b, "div");
  Tensor out = map_binary(a, b, [](auto x, auto y) { return x / y; });
  return record(out, "div", {a, b}, [a, b](const Tensor& g) {
    Tensor ga, gb;
    if (a.requires_grad()) {
      ga = detail::sum_to_shape(map_binary(g, b, [](auto x, auto y) { return x / y; }), a.shape());
    }
    if (b.requires_grad()) {
      Tensor t = map_binary(a, b, [](auto x, auto y) { return -x / (y * y); });
      gb = detail::sum_to_shape(map_binary(g, t, Times{}), b.shape());
    }
    return std::vector<Tensor>{ga, gb};
  });
}

Tensor add(const Tensor& a, double b) {
  Tensor out = map_unary(a, [b](auto x) { return static_cast<decltype(x)>(x + b); });
  return record(out, "add_scalar", {a}, [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

Tensor mul(const Tensor& a, double b) {
  Tensor out = map_unary(a, [b](auto x) { return static_cast<decltype(x)>(x * b); });
  return record(out, "mul_scalar", {a}, [b](const Tensor& g) {
    return std::vector<Tensor>{map_unary(g, [b](auto v) { return static_cast<decltype(v)>(v * b); })};
  });
}

Tensor rsub(double b, const Tensor& a) {
  Tensor out = map_unary(a, [b](auto x) { return static_cast<decltype(x)>(b - x); });
  return record(out, "rsub_scalar", {a}, [](const Tensor& g) {
    return std::vector<Tensor>{map_unary(g, [](auto v) { return -v; })};
  });
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

Tensor exp(const Tensor& a) {
  Tensor out = map_unary(a, [](auto x) { return std::exp(x); });
  return record(out, "exp", {a}, [out](const Tensor& g) {
    return std::vector<Tensor>{map_binary(g, out.detach(), Times{})};
  });
}

Tensor log(const Tensor& a) {
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = a.data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!(d[i] > T(0))) {
        throw DomainError("log: non-positive input " + std::to_string(static_cast<double>(d[i])) +
                          " at flat index " + std::to_string(i));
      }
    }
  });
  Tensor out = map_unary(a, [](auto x) { return std::log(x); });
  return record(out, "log", {a}, [a](const Tensor& g) {
    return std::vector<Tensor>{map_binary(g, a, [](auto v, auto x) { return v / x; })};
  });
}

Tensor pow(const Tensor& a, double p) {
  Tensor out = map_unary(a, [p](auto x) { return static_cast<decltype(x)>(std::pow(x, p)); });
  return record(out, "pow", {a}, [a, p](const Tensor& g) {
    if (p == 0.0) return std::vector<Tensor>{Tensor::zeros(a.shape(), a.dtype())};
    return std::vector<Tensor>{map_binary(g, a, [p](auto v, auto x) {
      using T = decltype(x);
      return static_cast<T>(v * p * std::pow(x, p - 1.0));
    })};
  });
}

Tensor sigmoid(const Tensor& a) {
  Tensor out = map_unary(a, [](auto x) {
    using T = decltype(x);
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
  });
  return record(out, "sigmoid", {a}, [s = out.detach()](const Tensor& g) {
    return std::vector<Tensor>{map_binary(g, s, [](auto v, auto y) { return v * y * (1 - y); })};
  });
}

Tensor relu(const Tensor& a) {
  Tensor out = map_unary(a, [](auto x) { return x > 0 ? x : decltype(x)(0); });
  return record(out, "relu", {a}, [a](const Tensor& g) {
    return std::vector<Tensor>{map_binary(g, a, [](auto v, auto x) { return x > 0 ? v : decltype(v)(0); })};
  });
}

Tensor clamp_min(const Tensor& a, double lo) {
  Tensor out = map_unary(a, [lo](auto x) {
    using T = decltype(x);
    return x < static_cast<T>(lo) ? static_cast<T>(lo) : x;
  });
  return record(out, "clamp_min", {a}, [a, lo](const Tensor& g) {
    return std::vector<Tensor>{map_binary(g, a, [lo](auto v, auto x) {
      using T = decltype(x);
      return x < static_cast<T>(lo) ? T(0) : v;
    })};
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_same_dtype(a, b, "matmul");
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::empty({m, n}, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    Eigen::Map<const RowMat<T>> A(a.data<T>().data(), m, k);
    Eigen::Map<const RowMat<T>> B(b.data<T>().data(), k, n);
    Eigen::Map<RowMat<T>> C(out.data<T>().data(), m, n);
    C.noalias() = A * B;
  });
  return record(out, "matmul", {a, b}, [a, b, m, k, n](const Tensor& g) {
    Tensor ga = Tensor::empty({m, k}, a.dtype());
    Tensor gb = Tensor::empty({k, n}, a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
      using T = decltype(tag);
      Eigen::Map<const RowMat<T>> A(a.data<T>().data(), m, k);
      Eigen::Map<const RowMat<T>> B(b.data<T>().data(), k, n);
      Eigen::Map<const RowMat<T>> G(g.data<T>().data(), m, n);
      Eigen::Map<RowMat<T>>(ga.data<T>().data(), m, k).noalias() = G * B.transpose();
      Eigen::Map<RowMat<T>>(gb.data<T>().data(), k, n).noalias() = A.transpose() * G;
    });
    return std::vector<Tensor>{ga, gb};
  });
}

Tensor sum(const Tensor& a) {
  Tensor out = Tensor::empty({}, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    // Double accumulator keeps f32 sums stable and the order fixed.
    double acc = 0.0;
    for (auto v : a.data<T>()) acc += static_cast<double>(v);
    out.data<T>()[0] = static_cast<T>(acc);
  });
  const Shape sa = a.shape();
  const DType dt = a.dtype();
  return record(out, "sum", {a}, [sa, dt](const Tensor& g) {
    return std::vector<Tensor>{Tensor::full(sa, g.item(), dt)};
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return mul(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum(const Tensor& a, int axis, bool keepdim) {
  const int nd = static_cast<int>(a.ndim());
  const int ax = axis < 0 ? axis + nd : axis;
  if (ax < 0 || ax >= nd) {
    throw ShapeError("sum: axis " + std::to_string(axis) + " out of range for " + to_string(a.shape()));
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= a.shape()[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < nd; ++i) inner *= a.shape()[static_cast<std::size_t>(i)];
  const std::int64_t len = a.shape()[static_cast<std::size_t>(ax)];
  Shape out_shape = a.shape();
  if (keepdim) {
    out_shape[static_cast<std::size_t>(ax)] = 1;
  } else {
    out_shape.erase(out_shape.begin() + ax);
  }
  Tensor out = Tensor::zeros(out_shape, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pa = a.data<T>();
    auto po = out.data<T>();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t l = 0; l < len; ++l)
        for (std::int64_t i = 0; i < inner; ++i)
          po[static_cast<std::size_t>(o * inner + i)] += pa[static_cast<std::size_t>((o * len + l) * inner + i)];
  });
  const Shape sa = a.shape();
  const DType dt = a.dtype();
  return record(out, "sum_axis", {a}, [sa, dt, outer, inner, len](const Tensor& g) {
    Tensor ga = Tensor::empty(sa, dt);
    dispatch(dt, [&](auto tag) {
      using T = decltype(tag);
      auto pg = g.data<T>();
      auto po = ga.data<T>();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t l = 0; l < len; ++l)
          for (std::int64_t i = 0; i < inner; ++i)
            po[static_cast<std::size_t>((o * len + l) * inner + i)] = pg[static_cast<std::size_t>(o * inner + i)];
    });
    return std::vector<Tensor>{ga};
  });
}

Tensor mean(const Tensor& a, int axis, bool keepdim) {
  const std::int64_t len = a.dim(axis);
  if (len == 0) throw ShapeError("mean over empty axis");
  return mul(sum(a, axis, keepdim), 1.0 / static_cast<double>(len));
}

Tensor reshape(const Tensor& a, Shape shape) {
  Tensor out = a.reshaped(std::move(shape));
  const Shape sa = a.shape();
  return record(out, "reshape", {a}, [sa](const Tensor& g) { return std::vector<Tensor>{g.reshaped(sa)}; });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Tensor& first = parts.front();
  const int ax = channel_axis(first, "concat_channels");
  std::int64_t total = 0;
  for (const auto& p : parts) {
    detail::require_same_dtype(first, p, "concat_channels");
    bool ok = p.ndim() == first.ndim();
    for (std::size_t d = 0; ok && d < p.ndim(); ++d) {
      if (static_cast<int>(d) != ax && p.shape()[d] != first.shape()[d]) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat_channels: shape " + to_string(p.shape()) + " incompatible with " +
                       to_string(first.shape()));
    }
    total += p.shape()[static_cast<std::size_t>(ax)];
  }
  const std::int64_t outer = ax == 1 ? first.dim(0) : 1;
  const std::int64_t plane = first.dim(-1) * first.dim(-2);
  Shape out_shape = first.shape();
  out_shape[static_cast<std::size_t>(ax)] = total;
  Tensor out = Tensor::empty(out_shape, first.dtype());
  std::vector<std::int64_t> widths;
  dispatch(first.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto po = out.data<T>();
    std::int64_t offset = 0;
    for (const auto& p : parts) {
      const std::int64_t c = p.shape()[static_cast<std::size_t>(ax)];
      widths.push_back(c);
      auto pp = p.data<T>();
      for (std::int64_t b = 0; b < outer; ++b) {
        std::copy_n(pp.begin() + b * c * plane, c * plane, po.begin() + (b * total + offset) * plane);
      }
      offset += c;
    }
  });
  return record(out, "concat_channels", parts, [widths, outer, plane, total, out_shape](const Tensor& g) {
    std::vector<Tensor> grads;
    std::int64_t offset = 0;
    for (auto c : widths) {
      Shape s = out_shape;
      s[out_shape.size() == 4 ? 1 : 0] = c;
      Tensor gi = Tensor::empty(s, g.dtype());
      dispatch(g.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto pg = g.data<T>();
        auto pi = gi.data<T>();
        for (std::int64_t b = 0; b < outer; ++b) {
          std::copy_n(pg.begin() + (b * total + offset) * plane, c * plane, pi.begin() + b * c * plane);
        }
      });
      offset += c;
      grads.push_back(gi);
    }
    return grads;
  });
}

Tensor slice_channels(const Tensor& a, std::int64_t start, std::int64_t count) {
  const int ax = channel_axis(a, "slice_channels");
  const std::int64_t channels = a.shape()[static_cast<std::size_t>(ax)];
  if (start < 0 || count < 0 || start + count > channels) {
    throw ShapeError("slice_channels: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of bounds for " + std::to_string(channels) + " channels");
  }
  const std::int64_t outer = ax == 1 ? a.dim(0) : 1;
  const std::int64_t plane = a.dim(-1) * a.dim(-2);
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(ax)] = count;
  Tensor out = Tensor::empty(out_shape, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pa = a.data<T>();
    auto po = out.data<T>();
    for (std::int64_t b = 0; b < outer; ++b) {
      std::copy_n(pa.begin() + (b * channels + start) * plane, count * plane, po.begin() + b * count * plane);
    }
  });
  const Shape sa = a.shape();
  return record(out, "slice_channels", {a}, [sa, outer, plane, channels, start, count](const Tensor& g) {
    Tensor ga = Tensor::zeros(sa, g.dtype());
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pg = g.data<T>();
      auto po = ga.data<T>();
      for (std::int64_t b = 0; b < outer; ++b) {
        std::copy_n(pg.begin() + b * count * plane, count * plane, po.begin() + (b * channels + start) * plane);
      }
    });
    return std::vector<Tensor>{ga};
  });
}

Tensor softmax_channels(const Tensor& logits) {
  require_4d(logits, "softmax_channels");
  const auto B = logits.dim(0), K = logits.dim(1), P = logits.dim(2) * logits.dim(3);
  Tensor out = Tensor::empty(logits.shape(), logits.dtype());
  dispatch(logits.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = logits.data<T>();
    auto y = out.data<T>();
    for (std::int64_t b = 0; b < B; ++b) {
      const std::size_t base = static_cast<std::size_t>(b * K * P);
      for (std::int64_t p = 0; p < P; ++p) {
        T mx = x[base + static_cast<std::size_t>(p)];
        for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, x[base + static_cast<std::size_t>(k * P + p)]);
        T z = 0;
        for (std::int64_t k = 0; k < K; ++k) {
          const std::size_t i = base + static_cast<std::size_t>(k * P + p);
          y[i] = std::exp(x[i] - mx);
          z += y[i];
        }
        for (std::int64_t k = 0; k < K; ++k) y[base + static_cast<std::size_t>(k * P + p)] /= z;
      }
    }
  });
  return record(out, "softmax_channels", {logits}, [s = out.detach(), B, K, P](const Tensor& g) {
    Tensor gx = Tensor::empty(s.shape(), s.dtype());
    dispatch(s.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto ps = s.data<T>();
      auto pg = g.data<T>();
      auto po = gx.data<T>();
      for (std::int64_t b = 0; b < B; ++b) {
        const std::size_t base = static_cast<std::size_t>(b * K * P);
        for (std::int64_t p = 0; p < P; ++p) {
          T dot = 0;
          for (std::int64_t k = 0; k < K; ++k) {
            const std::size_t i = base + static_cast<std::size_t>(k * P + p);
            dot += pg[i] * ps[i];
          }
          for (std::int64_t k = 0; k < K; ++k) {
            const std::size_t i = base + static_cast<std::size_t>(k * P + p);
            po[i] = ps[i] * (pg[i] - dot);
          }
        }
      }
    });
    return std::vector<Tensor>{gx};
  });
}

Tensor gather_class(const Tensor& probs, const Tensor& labels) {
  require_4d(probs, "gather_class");
  const auto B = probs.dim(0), K = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
  if (labels.shape() != Shape{B, H, W}) {
    throw ShapeError("gather_class: labels shape " + to_string(labels.shape()) + " does not match " +
                     to_string(Shape{B, H, W}));
  }
  const std::int64_t P = H * W;
  std::vector<std::int64_t> cls(static_cast<std::size_t>(B * P));
  for (std::int64_t i = 0; i < B * P; ++i) {
    const double v = labels.at(i);
    const auto k = static_cast<std::int64_t>(v);
    if (static_cast<double>(k) != v || k < 0 || k >= K) {
      throw DomainError("gather_class: label " + std::to_string(v) + " at flat index " + std::to_string(i) +
                        " outside [0, " + std::to_string(K) + ")");
    }
    cls[static_cast<std::size_t>(i)] = k;
  }
  Tensor out = Tensor::empty({B, H, W}, probs.dtype());
  dispatch(probs.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto pp = probs.data<T>();
    auto po = out.data<T>();
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t p = 0; p < P; ++p)
        po[static_cast<std::size_t>(b * P + p)] =
            pp[static_cast<std::size_t>((b * K + cls[static_cast<std::size_t>(b * P + p)]) * P + p)];
  });
  const Shape sp = probs.shape();
  return record(out, "gather_class", {probs}, [sp, cls, B, K, P](const Tensor& g) {
    Tensor gp = Tensor::zeros(sp, g.dtype());
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pg = g.data<T>();
      auto po = gp.data<T>();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t p = 0; p < P; ++p)
          po[static_cast<std::size_t>((b * K + cls[static_cast<std::size_t>(b * P + p)]) * P + p)] =
              pg[static_cast<std::size_t>(b * P + p)];
    });
    return std::vector<Tensor>{gp};
  });
}

Tensor instance_norm(const Tensor& x, double eps) {
  require_4d(x, "instance_norm");
  const auto planes = x.dim(0) * x.dim(1);
  const auto P = x.dim(2) * x.dim(3);
  Tensor out = Tensor::empty(x.shape(), x.dtype());
  std::vector<double> inv_std(static_cast<std::size_t>(planes));
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.data<T>();
    for (std::int64_t q = 0; q < planes; ++q) {
      const std::size_t base = static_cast<std::size_t>(q * P);
      double mu = 0.0;
      for (std::int64_t p = 0; p < P; ++p) mu += static_cast<double>(px[base + static_cast<std::size_t>(p)]);
      mu /= static_cast<double>(P);
      double var = 0.0;
      for (std::int64_t p = 0; p < P; ++p) {
        const double d = static_cast<double>(px[base + static_cast<std::size_t>(p)]) - mu;
        var += d * d;
      }
      var /= static_cast<double>(P);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(q)] = is;
      for (std::int64_t p = 0; p < P; ++p) {
        const std::size_t i = base + static_cast<std::size_t>(p);
        po[i] = static_cast<T>((static_cast<double>(px[i]) - mu) * is);
      }
    }
  });
  return record(out, "instance_norm", {x}, [y = out.detach(), inv_std, planes, P](const Tensor& g) {
    Tensor gx = Tensor::empty(y.shape(), y.dtype());
    dispatch(y.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto py = y.data<T>();
      auto pg = g.data<T>();
      auto po = gx.data<T>();
      for (std::int64_t q = 0; q < planes; ++q) {
        const std::size_t base = static_cast<std::size_t>(q * P);
        double mg = 0.0, mgy = 0.0;
        for (std::int64_t p = 0; p < P; ++p) {
          const std::size_t i = base + static_cast<std::size_t>(p);
          mg += static_cast<double>(pg[i]);
          mgy += static_cast<double>(pg[i]) * static_cast<double>(py[i]);
        }
        mg /= static_cast<double>(P);
        mgy /= static_cast<double>(P);
        const double is = inv_std[static_cast<std::size_t>(q)];
        for (std::int64_t p = 0; p < P; ++p) {
          const std::size_t i = base + static_cast<std::size_t>(p);
          po[i] = static_cast<T>(is * (static_cast<double>(pg[i]) - mg - static_cast<double>(py[i]) * mgy));
        }
      }
    });
    return std::vector<Tensor>{gx};
  });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_4d(x, "upsample_nearest2x");
  const auto planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out = Tensor::empty({x.dim(0), x.dim(1), 2 * H, 2 * W}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto px = x.data<T>();
    auto po = out.data<T>();
    for (std::int64_t q = 0; q < planes; ++q)
      for (std::int64_t i = 0; i < 2 * H; ++i)
        for (std::int64_t j = 0; j < 2 * W; ++j)
          po[static_cast<std::size_t>((q * 2 * H + i) * 2 * W + j)] =
              px[static_cast<std::size_t>((q * H + i / 2) * W + j / 2)];
  });
  const Shape sx = x.shape();
  return record(out, "upsample_nearest2x", {x}, [sx, planes, H, W](const Tensor& g) {
    Tensor gx = Tensor::zeros(sx, g.dtype());
    dispatch(g.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto pg = g.data<T>();
      auto po = gx.data<T>();
      for (std::int64_t q = 0; q < planes; ++q)
        for (std::int64_t i = 0; i < 2 * H; ++i)
          for (std::int64_t j = 0; j < 2 * W; ++j)
            po[static_cast<std::size_t>((q * H + i / 2) * W + j / 2)] +=
                pg[static_cast<std::size_t>((q * 2 * H + i) * 2 * W + j)];
    });
    return std::vector<Tensor>{gx};
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_4d(x, "global_avg_pool");
  const auto B = x.dim(0), C = x.dim(1);
  return reshape(mean(reshape(x, {B, C, x.dim(2) * x.dim(3)}), 2), {B, C, 1, 1});
}

}  // namespace pgd::ops

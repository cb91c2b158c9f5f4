#include "pgd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "pgd/pgdt.hpp"
#include "pgd/random.hpp"

namespace pgd {

namespace {

using random::mix;
using random::Rng;

using Mask = std::vector<std::uint8_t>;

Mask class_mask(const Tensor& label, int k) {
  Mask m(static_cast<std::size_t>(label.numel()));
  for (std::int64_t i = 0; i < label.numel(); ++i) m[static_cast<std::size_t>(i)] = label.at(i) == k;
  return m;
}

// One step of 8-neighbour dilation (grow) or erosion (!grow).
Mask morph_step(const Mask& m, std::int64_t H, std::int64_t W, bool grow) {
  Mask out(m.size());
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j) {
      bool any = false, all = true;
      for (std::int64_t di = -1; di <= 1; ++di)
        for (std::int64_t dj = -1; dj <= 1; ++dj) {
          const std::int64_t y = i + di, x = j + dj;
          const bool v = y >= 0 && y < H && x >= 0 && x < W && m[static_cast<std::size_t>(y * W + x)];
          any = any || v;
          all = all && v;
        }
      out[static_cast<std::size_t>(i * W + j)] = grow ? any : all;
    }
  return out;
}

Mask morph(Mask m, std::int64_t H, std::int64_t W, bool grow, int steps) {
  for (int s = 0; s < steps; ++s) m = morph_step(m, H, W, grow);
  return m;
}

struct Geometry {
  double cy, cx, a, b, theta, thickness;
  double ty, tx;  // tumor anchor on the inner wall boundary
  double harmonics[3], phases[3];
};

// Elliptical radius of (y, x) for semi-axes (a, b) in the rotated frame.
double ellipse_radius(const Geometry& g, double y, double x, double a, double b) {
  const double dy = y - g.cy, dx = x - g.cx;
  const double u = std::cos(g.theta) * dx + std::sin(g.theta) * dy;
  const double v = -std::sin(g.theta) * dx + std::cos(g.theta) * dy;
  return std::sqrt((u / a) * (u / a) + (v / b) * (v / b));
}

bool in_tumor(const Geometry& g, double r0, double y, double x) {
  const double dy = y - g.ty, dx = x - g.tx;
  const double psi = std::atan2(dy, dx);
  double r = 1.0;
  for (int k = 0; k < 3; ++k) r += g.harmonics[k] * std::cos((k + 2) * psi + g.phases[k]);
  return std::sqrt(dy * dy + dx * dx) <= r0 * r;
}

// Renders the clean label for a tumor base radius r0; returns tumor count.
std::int64_t render_label(const Geometry& g, double r0, std::int64_t H, std::int64_t W, std::vector<int>& label) {
  std::int64_t tumor = 0;
  label.assign(static_cast<std::size_t>(H * W), kBackground);
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j) {
      const double y = static_cast<double>(i), x = static_cast<double>(j);
      const bool inside_outer = ellipse_radius(g, y, x, g.a, g.b) <= 1.0;
      if (!inside_outer) continue;
      const bool inside_inner = ellipse_radius(g, y, x, g.a - g.thickness, g.b - g.thickness) <= 1.0;
      int c = inside_inner ? kBackground : kOrgan;
      if (in_tumor(g, r0, y, x)) c = kTumor;
      if (c == kTumor) ++tumor;
      label[static_cast<std::size_t>(i * W + j)] = c;
    }
  return tumor;
}

// Lumen pixels are kept apart from the outside so the renderer can give
// them their own intensity.
std::vector<std::uint8_t> lumen_mask(const Geometry& g, std::int64_t H, std::int64_t W) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(H * W));
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j)
      m[static_cast<std::size_t>(i * W + j)] =
          ellipse_radius(g, static_cast<double>(i), static_cast<double>(j), g.a - g.thickness, g.b - g.thickness) <= 1.0;
  return m;
}

std::vector<double> gaussian_blur(const std::vector<double>& img, std::int64_t H, std::int64_t W) {
  const double k[5] = {0.0545, 0.2442, 0.4026, 0.2442, 0.0545};  // sigma = 1
  std::vector<double> tmp(img.size()), out(img.size());
  auto clampi = [](std::int64_t v, std::int64_t n) { return std::clamp<std::int64_t>(v, 0, n - 1); };
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j) {
      double acc = 0;
      for (int t = -2; t <= 2; ++t) acc += k[t + 2] * img[static_cast<std::size_t>(i * W + clampi(j + t, W))];
      tmp[static_cast<std::size_t>(i * W + j)] = acc;
    }
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j) {
      double acc = 0;
      for (int t = -2; t <= 2; ++t) acc += k[t + 2] * tmp[static_cast<std::size_t>(clampi(i + t, H) * W + j)];
      out[static_cast<std::size_t>(i * W + j)] = acc;
    }
  return out;
}

Tensor label_tensor(const std::vector<int>& label, std::int64_t H, std::int64_t W) {
  Tensor t = Tensor::zeros({H, W});
  for (std::size_t i = 0; i < label.size(); ++i) t.set(static_cast<std::int64_t>(i), label[i]);
  return t;
}

std::string sample_id(std::int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%05lld", static_cast<long long>(index));
  return buf;
}

}  // namespace

std::string to_string(NoiseKind kind) { return kind == NoiseKind::boundary_morph ? "boundary_morph" : "random_flip"; }

NoiseKind parse_noise_kind(const std::string& text) {
  if (text == "boundary_morph") return NoiseKind::boundary_morph;
  if (text == "random_flip") return NoiseKind::random_flip;
  throw ConfigError("data.noise_kind: expected boundary_morph or random_flip, got '" + text + "'");
}

void GenConfig::validate() const {
  if (height < 16 || width < 16) throw ConfigError("data.height/width: extents must be >= 16");
  if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) {
    throw ConfigError("data.noise_rate: must lie in [0, 1], got " + std::to_string(noise_rate));
  }
  if (!(tumor_fraction_min > 0.0 && tumor_fraction_min <= tumor_fraction_max)) {
    throw ConfigError("data.tumor_fraction_min: must be > 0 and <= tumor_fraction_max");
  }
  const double pixels = static_cast<double>(height * width);
  if (tumor_fraction_min * pixels < 4.0) {
    throw ConfigError("data.tumor_fraction_min: " + std::to_string(tumor_fraction_min) + " of a " +
                      std::to_string(height) + "x" + std::to_string(width) + " image is under 4 tumor pixels");
  }
  if (tumor_fraction_max > 0.05) {
    throw ConfigError("data.tumor_fraction_max: a tumor attached to the wall cannot cover more than 5% of the image");
  }
}

SegSample generate_sample(const GenConfig& cfg, std::int64_t index) {
  cfg.validate();
  const std::int64_t H = cfg.height, W = cfg.width;
  const double S = static_cast<double>(std::min(H, W));
  Rng rng(mix(cfg.seed, static_cast<std::uint64_t>(index)));
  Geometry g{};
  g.cy = 0.5 * static_cast<double>(H - 1) + rng.uniform(-0.08, 0.08) * S;
  g.cx = 0.5 * static_cast<double>(W - 1) + rng.uniform(-0.08, 0.08) * S;
  g.a = rng.uniform(0.26, 0.36) * S;
  g.b = rng.uniform(0.26, 0.36) * S;
  g.theta = rng.uniform(0.0, std::numbers::pi);
  g.thickness = rng.uniform(0.05, 0.08) * S;
  const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
  for (int k = 0; k < 3; ++k) {
    g.harmonics[k] = rng.uniform(0.0, 0.12);
    g.phases[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  // Anchor on the inner wall boundary, in the rotated ellipse frame.
  const double ia = g.a - g.thickness, ib = g.b - g.thickness;
  const double u = ia * std::cos(phi), v = ib * std::sin(phi);
  g.tx = g.cx + std::cos(g.theta) * u - std::sin(g.theta) * v;
  g.ty = g.cy + std::sin(g.theta) * u + std::cos(g.theta) * v;

  // Tumor size: bisect the base radius until the pixel count meets a target
  // drawn from the inner 80% of the configured band.
  const double span = cfg.tumor_fraction_max - cfg.tumor_fraction_min;
  const double target_fraction = rng.uniform(cfg.tumor_fraction_min + 0.1 * span, cfg.tumor_fraction_max - 0.1 * span);
  const double target = target_fraction * static_cast<double>(H * W);
  std::vector<int> label;
  double lo = 0.5, hi = 0.25 * S;
  for (int it = 0; it < 40; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (static_cast<double>(render_label(g, mid, H, W, label)) < target) lo = mid;
    else hi = mid;
  }
  const std::int64_t tumor = render_label(g, hi, H, W, label);

  // Intensities: background ramp, darker lumen, bright wall, brighter tumor,
  // then blur and additive Gaussian noise.
  const auto lumen = lumen_mask(g, H, W);
  const double ramp = rng.uniform(0.0, 2.0 * std::numbers::pi);
  std::vector<double> img(static_cast<std::size_t>(H * W));
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j) {
      const auto p = static_cast<std::size_t>(i * W + j);
      double v0 = 0.15 + 0.05 * (std::cos(ramp) * static_cast<double>(j) / static_cast<double>(W) +
                                 std::sin(ramp) * static_cast<double>(i) / static_cast<double>(H));
      if (lumen[p]) v0 = 0.3;
      if (label[p] == kOrgan) v0 = 0.6;
      if (label[p] == kTumor) v0 = 0.85;
      img[p] = v0;
    }
  img = gaussian_blur(img, H, W);
  SegSample s;
  s.id = sample_id(index);
  s.image = Tensor::zeros({1, H, W});
  for (std::int64_t p = 0; p < H * W; ++p) {
    const double v = std::clamp(img[static_cast<std::size_t>(p)] + 0.04 * rng.normal(), 0.0, 1.0);
    // Values are kept f32-representable so the dataset files round-trip exactly.
    s.image.set(p, static_cast<double>(static_cast<float>(v)));
  }
  s.clean_label = label_tensor(label, H, W);
  s.label = s.clean_label.clone();
  s.tumor_fraction = static_cast<double>(tumor) / static_cast<double>(H * W);
  if (cfg.noise_rate > 0.0) return inject_noise(s, cfg.noise_rate, cfg.noise_kind, cfg.seed);
  return s;
}

std::vector<SegSample> generate(const GenConfig& cfg, std::int64_t n) {
  if (n < 1) throw ConfigError("generate: sample count must be >= 1");
  std::vector<SegSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) out.push_back(generate_sample(cfg, i));
  return out;
}

std::vector<std::int64_t> boundary_band(const Tensor& label) {
  const std::int64_t H = label.dim(0), W = label.dim(1);
  const Mask t = class_mask(label, kTumor);
  const Mask outer = morph(t, H, W, true, 2);
  const Mask inner = morph(t, H, W, false, 1);
  std::vector<std::int64_t> band;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (outer[i] && !inner[i]) band.push_back(static_cast<std::int64_t>(i));
  }
  return band;
}

SegSample inject_noise(const SegSample& sample, double rho, NoiseKind kind, std::uint64_t seed) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("noise_rate: must lie in [0, 1], got " + std::to_string(rho));
  SegSample out = sample;
  out.label = sample.clean_label.clone();
  out.noise_applied = false;
  const std::int64_t H = sample.clean_label.dim(0), W = sample.clean_label.dim(1);
  Rng rng(mix(seed ^ 0x5bd1e9955bd1e995ull, random::hash(sample.id)));
  if (kind == NoiseKind::boundary_morph) {
    if (rng.uniform() >= rho) return out;
    const bool grow = rng.uniform() < 0.5;
    const int steps = rng.uniform() < 0.5 ? 1 : 2;
    const Mask t = class_mask(sample.clean_label, kTumor);
    const Mask m = morph(t, H, W, grow, steps);
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i] == m[i]) continue;
      out.label.set(static_cast<std::int64_t>(i), grow ? kTumor : kOrgan);
      out.noise_applied = true;
    }
  } else {
    for (std::int64_t p : boundary_band(sample.clean_label)) {
      if (rng.uniform() >= rho) continue;
      out.label.set(p, sample.clean_label.at(p) == kTumor ? kOrgan : kTumor);
      out.noise_applied = true;
    }
  }
  return out;
}

void save_dataset(const std::vector<SegSample>& samples, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const char* sub : {"images", "labels", "clean_labels"}) {
    fs::create_directories(dir / sub, ec);
    if (ec) throw IoError("cannot create " + (dir / sub).string() + ": " + ec.message());
  }
  std::ostringstream manifest;
  manifest << "id\ttumor_fraction\tnoise_applied\n";
  for (const auto& s : samples) {
    pgdt::save(s.image.to(DType::f32), dir / "images" / (s.id + ".pgdt"));
    pgdt::save(s.label.to(DType::f32), dir / "labels" / (s.id + ".pgdt"));
    pgdt::save(s.clean_label.to(DType::f32), dir / "clean_labels" / (s.id + ".pgdt"));
    char frac[32];
    std::snprintf(frac, sizeof frac, "%.6f", s.tumor_fraction);
    manifest << s.id << '\t' << frac << '\t' << (s.noise_applied ? 1 : 0) << '\n';
  }
  std::ofstream out(dir / "manifest.tsv", std::ios::binary | std::ios::trunc);
  out << manifest.str();
  if (!out) throw IoError("cannot write " + (dir / "manifest.tsv").string());
}

std::vector<SegSample> load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.tsv", std::ios::binary);
  if (!in) throw IoError("cannot read dataset manifest " + (dir / "manifest.tsv").string());
  std::string line;
  std::getline(in, line);
  if (line != "id\ttumor_fraction\tnoise_applied") throw IoError("unexpected manifest header in " + dir.string());
  std::vector<SegSample> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    SegSample s;
    int noise = 0;
    if (!(ls >> s.id >> s.tumor_fraction >> noise)) throw IoError("malformed manifest line '" + line + "'");
    s.noise_applied = noise != 0;
    s.image = pgdt::load(dir / "images" / (s.id + ".pgdt")).to(DType::f64);
    s.label = pgdt::load(dir / "labels" / (s.id + ".pgdt")).to(DType::f64);
    s.clean_label = pgdt::load(dir / "clean_labels" / (s.id + ".pgdt")).to(DType::f64);
    if (s.image.ndim() != 3 || s.label.ndim() != 2 || s.label.shape() != s.clean_label.shape() ||
        s.image.dim(1) != s.label.dim(0) || s.image.dim(2) != s.label.dim(1)) {
      throw IoError("sample " + s.id + " has inconsistent image/label shapes");
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw IoError("dataset " + dir.string() + " is empty");
  return out;
}

Batch make_batch(const std::vector<SegSample>& samples, const std::vector<std::size_t>& which, DType dtype) {
  if (which.empty()) throw ShapeError("make_batch: empty selection");
  const auto& first = samples.at(which[0]);
  const std::int64_t H = first.label.dim(0), W = first.label.dim(1), B = static_cast<std::int64_t>(which.size());
  Batch b{Tensor::empty({B, 1, H, W}, dtype), Tensor::empty({B, H, W}, dtype), Tensor::empty({B, H, W}, dtype)};
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto pi = b.images.data<T>();
    auto pl = b.labels.data<T>();
    auto pc = b.clean_labels.data<T>();
    for (std::int64_t k = 0; k < B; ++k) {
      const auto& s = samples.at(which[static_cast<std::size_t>(k)]);
      if (s.label.dim(0) != H || s.label.dim(1) != W) throw ShapeError("make_batch: samples differ in size");
      auto si = s.image.data<double>();
      auto sl = s.label.data<double>();
      auto sc = s.clean_label.data<double>();
      for (std::int64_t p = 0; p < H * W; ++p) {
        const auto d = static_cast<std::size_t>(k * H * W + p);
        pi[d] = static_cast<T>(si[static_cast<std::size_t>(p)]);
        pl[d] = static_cast<T>(sl[static_cast<std::size_t>(p)]);
        pc[d] = static_cast<T>(sc[static_cast<std::size_t>(p)]);
      }
    }
  });
  return b;
}

}  // namespace pgd

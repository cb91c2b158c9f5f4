#include "pgd/gradcheck_suite.hpp"

#include <algorithm>

#include "pgd/coord.hpp"
#include "pgd/data.hpp"
#include "pgd/deform.hpp"
#include "pgd/losses.hpp"
#include "pgd/network.hpp"
#include "pgd/ops.hpp"
#include "pgd/random.hpp"

namespace pgd {

namespace {

Tensor uniform(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  random::Rng rng(seed);
  Tensor t = Tensor::empty(shape);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(lo, hi));
  return t;
}

// Offsets whose sample positions stay at least 0.2 px off the lattice.
Tensor fractional_offsets(const Shape& shape, std::uint64_t seed) {
  random::Rng rng(seed);
  Tensor t = Tensor::empty(shape);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    t.set(i, static_cast<double>(rng.below(4)) - 2.0 + rng.uniform(0.2, 0.8));
  }
  return t;
}

Tensor labels_of(std::int64_t b, std::int64_t h, std::int64_t w, std::uint64_t seed) {
  random::Rng rng(seed);
  Tensor t = Tensor::empty({b, h, w});
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, static_cast<double>(rng.below(3)));
  return t;
}

// p_t samples alternating below and above the 0.2 threshold, clear of the
// kink and of the probability floor.
Tensor pt_values(std::uint64_t seed) {
  random::Rng rng(seed);
  Tensor t = Tensor::empty({1, 3, 4});
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, i % 2 ? rng.uniform(0.02, 0.18) : rng.uniform(0.22, 0.98));
  return t;
}

ConvSpec random_spec(std::int64_t cin, std::int64_t cout, std::int64_t k, std::int64_t stride, std::int64_t dil,
                     std::uint64_t seed) {
  ConvSpec s = make_conv_spec(cin, cout, k, stride, dil);
  s.weight = uniform(s.weight.shape(), seed);
  s.bias = uniform(s.bias.shape(), seed + 1);
  return s;
}

// A scalar f(inputs) = sum(op(inputs) * probe) for an op with fixed output shape.
GradcheckEntry op_entry(std::string name, std::function<std::vector<Tensor>(std::uint64_t)> make_inputs,
                        std::function<Tensor(const std::vector<Tensor>&, std::uint64_t)> f) {
  GradcheckEntry e;
  e.suite = "ops";
  e.seeds = 10;
  e.run = [name, make_inputs, f](std::uint64_t seed) {
    return gradcheck(name, [&](const std::vector<Tensor>& in) { return f(in, seed); }, make_inputs(seed));
  };
  e.name = std::move(name);
  return e;
}

Tensor probe_sum(const Tensor& y, std::uint64_t seed) { return ops::sum(ops::mul(y, uniform(y.shape(), seed + 999))); }

// Deformable convolution with one of its four differentiable inputs free;
// the other three are rebuilt from the seed as constants.
std::vector<Tensor> deform_inputs(std::uint64_t seed, ConvSpec& spec) {
  const std::int64_t stride = 1 + static_cast<std::int64_t>(seed % 2);
  const std::int64_t dil = 1 + static_cast<std::int64_t>(seed / 2 % 2);
  spec = random_spec(2, 2, 3, stride, dil, seed * 31);
  return {uniform({1, 2, 6, 6}, seed * 31 + 3), spec.weight.clone(),
          fractional_offsets(expected_offset_shape(spec, 1, 6, 6), seed * 31 + 4),
          uniform(expected_mask_shape(spec, 1, 6, 6), seed * 31 + 5, 0.1, 0.9)};
}

GradcheckEntry deform_entry(const std::string& path, std::size_t which) {
  return op_entry(
      "deform_conv2d." + path,
      [which](std::uint64_t seed) {
        ConvSpec s;
        return std::vector<Tensor>{deform_inputs(seed, s)[which]};
      },
      [which](const std::vector<Tensor>& in, std::uint64_t seed) {
        ConvSpec s;
        auto v = deform_inputs(seed, s);
        v[which] = in[0];
        s.weight = v[1];
        return probe_sum(deform_conv2d(v[0], {v[2], v[3]}, s), seed);
      });
}

GradcheckEntry loss_entry(std::string name, std::function<GradcheckReport(std::uint64_t)> run) {
  GradcheckEntry e;
  e.name = std::move(name);
  e.suite = "losses";
  e.seeds = 10;
  e.run = std::move(run);
  return e;
}

// Loss of the full network on one 16×16 toy sample, with respect to the
// image and to parameters of every stage. Offsets are moved off the integer
// lattice where bilinear sampling has kinks.
GradcheckReport network_check(std::uint64_t seed) {
  NetworkConfig c;
  c.base_channels = 2;
  c.depth = 3;
  c.deformable_blocks = {1, 2};
  c.localization_channels = 2;
  c.aspp_rates = {1};
  ModelState s = build(c, seed, DType::f64);
  for (const char* p : {"enc1", "enc2", "dec1", "dec2"}) {
    Tensor w = s.param(std::string(p) + ".offset.weight");
    Tensor b = s.param(std::string(p) + ".offset.bias");
    const Tensor rw = uniform(w.shape(), seed + 42, -0.05, 0.05);
    for (std::int64_t i = 0; i < w.numel(); ++i) w.set(i, rw.at(i));
    for (std::int64_t i = 0; i < 18; ++i) b.set(i, 0.3 + 0.02 * static_cast<double>(i));
  }
  GenConfig g;
  g.height = g.width = 16;
  g.tumor_fraction_min = 0.02;
  g.tumor_fraction_max = 0.05;
  g.seed = seed;
  const SegSample sample = generate_sample(g, 0);
  Tensor image = sample.image.reshaped({1, 1, 16, 16}).clone();
  image.set_requires_grad(true);
  const Tensor labels = sample.label.reshaped({1, 16, 16});
  const LossConfig lc;
  std::vector<Tensor> inputs{image};
  for (const char* n : {"enc1.offset.weight", "enc1.conv1.weight", "loc1.conv.weight", "aspp.fuse.weight",
                        "dec2.offset.bias", "head.weight"}) {
    inputs.push_back(s.param(n));
  }
  GradcheckOptions opts;
  opts.tolerance = 1e-3;
  opts.max_coords = 12;
  return gradcheck(
      "network",
      [&](const std::vector<Tensor>& in) {
        return combined_loss(ops::softmax_channels(forward(s, in[0])), labels, lc, LossPhase::FL);
      },
      inputs, opts);
}

std::vector<GradcheckEntry> make_registry() {
  std::vector<GradcheckEntry> r;
  auto add = [&](GradcheckEntry e) { r.push_back(std::move(e)); };

  // Tensor algebra.
  add(op_entry("add_sub", [](auto s) { return std::vector<Tensor>{uniform({2, 3}, s), uniform({1, 3}, s + 1)}; },
               [](auto& in, auto s) { return probe_sum(ops::mul(ops::sub(ops::add(in[0], in[1]), in[1]), in[1]), s); }));
  add(op_entry("mul_div",
               [](auto s) { return std::vector<Tensor>{uniform({2, 3}, s), uniform({2, 3}, s + 1, 0.5, 2.0)}; },
               [](auto& in, auto s) { return probe_sum(ops::div(ops::mul(in[0], in[0]), in[1]), s); }));
  add(op_entry("matmul", [](auto s) { return std::vector<Tensor>{uniform({3, 4}, s), uniform({4, 2}, s + 1)}; },
               [](auto& in, auto s) { return probe_sum(ops::matmul(in[0], in[1]), s); }));
  add(op_entry("exp_log", [](auto s) { return std::vector<Tensor>{uniform({5}, s)}; },
               [](auto& in, auto s) { return probe_sum(ops::log(ops::add(ops::exp(in[0]), 1.0)), s); }));
  add(op_entry("pow", [](auto s) { return std::vector<Tensor>{uniform({5}, s, 0.2, 2.0)}; },
               [](auto& in, auto s) { return probe_sum(ops::pow(in[0], 1.7), s); }));
  add(op_entry("sigmoid", [](auto s) { return std::vector<Tensor>{uniform({6}, s, -3, 3)}; },
               [](auto& in, auto s) { return probe_sum(ops::sigmoid(in[0]), s); }));
  add(op_entry("relu", [](auto s) { return std::vector<Tensor>{uniform({6}, s, 0.1, 1.0)}; },
               [](auto& in, auto s) { return probe_sum(ops::mul(ops::relu(in[0]), in[0]), s); }));
  add(op_entry("clamp_min", [](auto s) { return std::vector<Tensor>{uniform({6}, s, 0.1, 1.0)}; },
               [](auto& in, auto s) { return probe_sum(ops::pow(ops::clamp_min(in[0], 0.0), 2.0), s); }));
  add(op_entry("sum_mean_axis", [](auto s) { return std::vector<Tensor>{uniform({2, 3, 2}, s)}; },
               [](auto& in, auto s) { return probe_sum(ops::pow(ops::mean(ops::sum(in[0], 1, true), 2), 2.0), s); }));
  add(op_entry("concat_slice",
               [](auto s) { return std::vector<Tensor>{uniform({2, 2, 3, 3}, s), uniform({2, 3, 3, 3}, s + 1)}; },
               [](auto& in, auto s) { return probe_sum(ops::slice_channels(ops::concat_channels({in[0], in[1]}), 1, 3), s); }));
  add(op_entry("softmax_channels", [](auto s) { return std::vector<Tensor>{uniform({2, 3, 4, 4}, s, -2, 2)}; },
               [](auto& in, auto s) { return probe_sum(ops::softmax_channels(in[0]), s); }));
  add(op_entry("instance_norm", [](auto s) { return std::vector<Tensor>{uniform({2, 3, 4, 4}, s)}; },
               [](auto& in, auto s) { return probe_sum(ops::instance_norm(in[0]), s); }));
  add(op_entry("upsample_nearest2x", [](auto s) { return std::vector<Tensor>{uniform({1, 2, 3, 3}, s)}; },
               [](auto& in, auto s) { return probe_sum(ops::upsample_nearest2x(in[0]), s); }));
  add(op_entry("global_avg_pool", [](auto s) { return std::vector<Tensor>{uniform({2, 2, 3, 3}, s)}; },
               [](auto& in, auto s) { return probe_sum(ops::global_avg_pool(in[0]), s); }));
  add(op_entry("gather_class", [](auto s) { return std::vector<Tensor>{uniform({1, 3, 2, 2}, s)}; },
               [](auto& in, auto s) {
                 return probe_sum(ops::log(ops::gather_class(ops::softmax_channels(in[0]), labels_of(1, 2, 2, s))), s);
               }));

  // Sampling and convolution.
  add(op_entry("bilinear_sample",
               [](auto s) {
                 const double d = static_cast<double>(s % 10) * 0.07;
                 return std::vector<Tensor>{uniform({2, 5, 5}, s), Tensor::from_values({2}, {1.3 + d, 2.6 - d})};
               },
               [](auto& in, auto s) { return probe_sum(bilinear_sample(in[0], in[1]), s); }));
  add(op_entry("conv2d",
               [](auto s) {
                 const ConvSpec c = random_spec(2, 3, 3, 1 + s % 2, 1 + s / 2 % 2, s);
                 return std::vector<Tensor>{uniform({2, 2, 6, 6}, s + 7), c.weight.clone(), c.bias.clone()};
               },
               [](auto& in, auto s) {
                 ConvSpec c = random_spec(2, 3, 3, 1 + s % 2, 1 + s / 2 % 2, s);
                 c.weight = in[1];
                 c.bias = in[2];
                 return probe_sum(conv2d(in[0], c), s);
               }));
  add(deform_entry("x", 0));
  add(deform_entry("weight", 1));
  add(deform_entry("offsets", 2));
  add(deform_entry("masks", 3));
  add(op_entry("offset_mask_branch",
               [](auto s) {
                 const ConvSpec d = random_spec(2, 2, 3, 1, 1, s * 41);
                 const ConvSpec b = make_offset_mask_branch(3, d);
                 // Small weights keep the sampling points off the lattice.
                 return std::vector<Tensor>{uniform({1, 2, 5, 5}, s * 41 + 3), uniform({1, 3, 5, 5}, s * 41 + 4),
                                            uniform(b.weight.shape(), s * 41 + 1, -0.05, 0.05),
                                            uniform(b.bias.shape(), s * 41 + 2, 0.2, 0.45)};
               },
               [](auto& in, auto s) {
                 const ConvSpec d = random_spec(2, 2, 3, 1, 1, s * 41);
                 ConvSpec b = make_offset_mask_branch(3, d);
                 b.weight = in[2];
                 b.bias = in[3];
                 return probe_sum(deform_conv2d(in[0], offset_mask_branch(in[1], b), d), s);
               }));
  add(op_entry("add_coord", [](auto s) { return std::vector<Tensor>{uniform({1, 2, 3, 3}, s)}; },
               [](auto& in, auto s) { return probe_sum(add_coord(in[0]), s); }));
  add(op_entry("coord_pool", [](auto s) { return std::vector<Tensor>{uniform({2, 2, 6, 6}, s)}; },
               [](auto& in, auto s) { return probe_sum(coord_pool(in[0]).pooled, s); }));

  // Losses, evaluated away from the 0.2 kink and the probability floor.
  add(loss_entry("ce", [](auto s) { return gradcheck("ce", [](const Tensor& p) { return ce_loss(p); }, pt_values(s)); }));
  add(loss_entry("focal", [](auto s) {
    return gradcheck("focal", [](const Tensor& p) { return focal_loss(p, 2.0); }, pt_values(s));
  }));
  add(loss_entry("nsfl", [](auto s) {
    return gradcheck("nsfl", [](const Tensor& p) { return nsfl_loss(p, 2.0, 0.5, 0.2); }, pt_values(s));
  }));
  add(loss_entry("dice", [](auto s) {
    const Tensor labels = labels_of(1, 4, 4, s + 30);
    return gradcheck(
        "dice", [&](const Tensor& z) { return dice_loss(ops::softmax_channels(z), labels, 1.0); },
        uniform({1, 3, 4, 4}, s + 40, -2, 2));
  }));
  add(loss_entry("combined", [](auto s) {
    const Tensor labels = labels_of(1, 4, 4, s + 30);
    const LossConfig cfg;
    // Near-uniform probabilities keep every p_t clear of the threshold.
    return gradcheck(
        "combined",
        [&](const Tensor& z) { return combined_loss(ops::softmax_channels(z), labels, cfg, LossPhase::NSFL); },
        uniform({1, 3, 4, 4}, s + 50, -0.05, 0.05));
  }));

  GradcheckEntry net;
  net.name = "network";
  net.suite = "network";
  net.seeds = 3;
  net.run = network_check;
  add(std::move(net));
  return r;
}

}  // namespace

const std::vector<GradcheckEntry>& gradcheck_registry() {
  static const std::vector<GradcheckEntry> registry = make_registry();
  return registry;
}

std::vector<SuiteResult> run_gradcheck_suite(const std::string& suite) {
  if (suite != "ops" && suite != "losses" && suite != "network" && suite != "all") {
    throw ConfigError("gradcheck: unknown suite '" + suite + "' (expected ops, losses, network or all)");
  }
  std::vector<SuiteResult> out;
  for (const auto& e : gradcheck_registry()) {
    if (suite != "all" && e.suite != suite) continue;
    SuiteResult r{e.name, e.suite, 0.0, 0.0, e.seeds, true};
    for (std::uint64_t seed = 0; seed < e.seeds; ++seed) {
      const GradcheckReport g = e.run(seed);
      r.max_rel_error = std::max(r.max_rel_error, g.max_rel_error);
      r.tolerance = g.tolerance;
      r.passed = r.passed && g.passed;
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace pgd

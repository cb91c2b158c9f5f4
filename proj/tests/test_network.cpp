#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "pgd/coord.hpp"
#include "pgd/deform.hpp"
#include "pgd/gradcheck.hpp"
#include "pgd/losses.hpp"
#include "pgd/metrics.hpp"
#include "pgd/network.hpp"
#include "pgd/ops.hpp"
#include "test_util.hpp"

using namespace pgd;
using pgd::testing::max_abs_diff;
using pgd::testing::random_tensor;

namespace {

NetworkConfig small_config() {
  NetworkConfig c;
  c.base_channels = 2;
  c.localization_channels = 3;
  c.aspp_rates = {1};
  return c;
}

ConvSpec spec_from(const ModelState& s, const std::string& name, std::int64_t dilation = 1) {
  ConvSpec spec;
  spec.weight = s.param(name + ".weight");
  spec.bias = s.param(name + ".bias");
  spec.out_channels = spec.weight.dim(0);
  spec.in_channels = spec.weight.dim(1);
  spec.kernel_h = spec.weight.dim(2);
  spec.kernel_w = spec.weight.dim(3);
  spec.dilation = dilation;
  spec.padding = dilation * (spec.kernel_h - 1) / 2;
  return spec;
}

// Plain UNet written out directly from the layer list: conv-norm-relu
// blocks, max pooling, ASPP, nearest upsampling with skip concatenation.
Tensor plain_unet_oracle(const ModelState& s, const Tensor& x) {
  const auto& cfg = s.config;
  auto block = [&](const std::string& p, const Tensor& in) {
    Tensor h = ops::relu(ops::instance_norm(conv2d(in, spec_from(s, p + ".conv1"))));
    return ops::relu(ops::instance_norm(conv2d(h, spec_from(s, p + ".conv2"))));
  };
  std::vector<Tensor> skips;
  Tensor h = x;
  for (std::int64_t i = 0; i < cfg.depth; ++i) {
    Tensor e = block("enc" + std::to_string(i), h);
    skips.push_back(e);
    h = coord_pool(e).pooled;
  }
  std::vector<Tensor> parts;
  for (std::size_t j = 0; j < cfg.aspp_rates.size(); ++j) {
    parts.push_back(ops::relu(conv2d(h, spec_from(s, "aspp.branch" + std::to_string(j), cfg.aspp_rates[j]))));
  }
  Tensor g = ops::relu(conv2d(ops::global_avg_pool(h), spec_from(s, "aspp.pool")));
  parts.push_back(ops::add(Tensor::zeros({h.dim(0), g.dim(1), h.dim(2), h.dim(3)}), g));
  h = ops::relu(conv2d(ops::concat_channels(parts), spec_from(s, "aspp.fuse")));
  for (std::int64_t i = cfg.depth - 1; i >= 0; --i) {
    h = block("dec" + std::to_string(i),
              ops::concat_channels({ops::upsample_nearest2x(h), skips[static_cast<std::size_t>(i)]}));
  }
  return conv2d(h, spec_from(s, "head"));
}

std::int64_t numel_of(const ModelState& s, const std::string& prefix) {
  std::int64_t n = 0;
  for (const auto& [name, t] : s.params)
    if (name.rfind(prefix, 0) == 0) n += t.numel();
  return n;
}

}  // namespace

TEST(NetworkConfig, DefaultsFollowArchitecture) {
  NetworkConfig c;
  EXPECT_EQ(c.localization_dilations, (std::vector<std::int64_t>{2, 3, 5}));
  EXPECT_EQ(c.deformable_blocks, (std::vector<std::int64_t>{1, 2, 3}));
  EXPECT_EQ(c.depth, 4);
  EXPECT_EQ(c.base_channels, 16);
  EXPECT_NO_THROW(c.validate());
}

TEST(NetworkConfig, InvalidDeformableIndexIsError) {
  NetworkConfig c;
  c.deformable_blocks = {1, 4};
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("deformable_blocks"), std::string::npos);
  }
  c = NetworkConfig{};
  c.depth = 2;
  c.deformable_blocks = {1};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(NetworkConfig, CanonicalRoundTripAndFingerprint) {
  NetworkConfig c = small_config();
  c.plain_conv_path = true;
  EXPECT_EQ(NetworkConfig::parse_canonical(c.canonical()), c);
  NetworkConfig d = c;
  d.use_add_coord = false;
  EXPECT_NE(c.fingerprint(), d.fingerprint());
  EXPECT_EQ(c.fingerprint(), NetworkConfig::parse_canonical(c.canonical()).fingerprint());
}

TEST(Build, SameSeedGivesIdenticalState) {
  const ModelState a = build(small_config(), 7);
  const ModelState b = build(small_config(), 7);
  const ModelState c = build(small_config(), 8);
  ASSERT_EQ(a.params.size(), b.params.size());
  bool any_diff = false;
  for (const auto& [name, t] : a.params) {
    EXPECT_EQ(t.to_vector(), b.param(name).to_vector()) << name;
    if (t.to_vector() != c.param(name).to_vector()) any_diff = true;
  }
  EXPECT_TRUE(any_diff);
}

TEST(Build, OffsetBranchesStartAtZero) {
  const ModelState s = build(small_config(), 1);
  for (const char* p : {"enc1", "enc2", "enc3", "dec1", "dec2", "dec3"}) {
    for (double v : s.param(std::string(p) + ".offset.weight").to_vector()) ASSERT_EQ(v, 0.0);
    EXPECT_EQ(s.param(std::string(p) + ".offset.weight").dim(0), 27);
  }
  EXPECT_FALSE(s.has("enc0.offset.weight"));
  EXPECT_FALSE(s.has("dec0.offset.weight"));
}

TEST(Build, PlainUnetHasNoPositionLayers) {
  const ModelState s = build(NetworkConfig::plain_unet(), 1);
  for (const auto& [name, _] : s.params) {
    EXPECT_EQ(name.find("offset"), std::string::npos) << name;
    EXPECT_EQ(name.find("loc"), std::string::npos) << name;
  }
  // Decoder block i reads the upsampled deeper features and the skip.
  EXPECT_EQ(s.param("dec0.conv1.weight").dim(1), 32 + 16);
  EXPECT_EQ(s.param("dec3.conv1.weight").dim(1), 128 + 128);
  EXPECT_EQ(s.param("head.weight").shape(), (Shape{3, 16, 1, 1}));
}

TEST(Build, DeformableToggleChangesCountByBranchParameters) {
  NetworkConfig with = small_config();
  NetworkConfig without = with;
  without.deformable_blocks.clear();
  const ModelState a = build(with, 3);
  const ModelState b = build(without, 3);
  // Branch i reads the block input plus the guide: loc channels + CoordPool
  // coordinates (2 channels per feature of block i-1).
  const std::int64_t base = with.base_channels, loc = with.localization_channels;
  std::int64_t expected = 0;
  for (std::int64_t i = 1; i <= 3; ++i) {
    const std::int64_t c = base << i, prev = base << (i - 1);
    const std::int64_t guide = loc + 2 * prev;
    const std::int64_t enc_in = prev;
    const std::int64_t dec_in = (base << std::min<std::int64_t>(i + 1, 3)) + 2 * c + c;
    expected += (enc_in + guide) * 9 * 27 + 27;
    expected += (dec_in + guide) * 9 * 27 + 27;
  }
  EXPECT_EQ(a.parameter_count() - b.parameter_count(), expected);
  EXPECT_EQ(numel_of(a, "enc1.offset") + numel_of(a, "enc2.offset") + numel_of(a, "enc3.offset") +
                numel_of(a, "dec1.offset") + numel_of(a, "dec2.offset") + numel_of(a, "dec3.offset"),
            expected);
}

TEST(LocalizationPath, GuideExtentsMatchBlockInputs) {
  const ModelState s = build(small_config(), 2);
  Tensor first = random_tensor({1, 2, 32, 32}, 3);
  std::vector<Tensor> coords;
  for (std::int64_t i = 0; i < 3; ++i) {
    const std::int64_t e = 32 >> (i + 1);
    coords.push_back(random_tensor({1, 2 * (2 << i), e, e}, 10 + static_cast<std::uint64_t>(i)));
  }
  const auto guides = localization_path(s, first, coords);
  ASSERT_EQ(guides.size(), 3u);
  for (std::int64_t k = 0; k < 3; ++k) {
    const std::int64_t e = 32 >> (k + 1);
    EXPECT_EQ(guides[static_cast<std::size_t>(k)].shape(), (Shape{1, 3 + 2 * (2 << k), e, e}));
  }
}

TEST(LocalizationPath, CoordinateMismatchNamesBlock) {
  const ModelState s = build(small_config(), 2);
  std::vector<Tensor> coords{random_tensor({1, 4, 8, 8}, 1)};
  try {
    localization_path(s, random_tensor({1, 2, 32, 32}, 3), coords);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("block 1"), std::string::npos);
  }
}

TEST(LocalizationPath, AddCoordAccountsForTwoInputChannels) {
  NetworkConfig c = small_config();
  const ModelState with = build(c, 1);
  c.use_add_coord = false;
  const ModelState without = build(c, 1);
  EXPECT_EQ(with.param("loc1.conv.weight").dim(1) - without.param("loc1.conv.weight").dim(1), 2);
}

TEST(LocalizationPath, PlainConvPathKeepsOutputShape) {
  NetworkConfig c = small_config();
  c.plain_conv_path = true;
  const ModelState plain = build(c, 1);
  const ModelState full = build(small_config(), 1);
  Tensor x = random_tensor({2, 1, 32, 32}, 4);
  EXPECT_EQ(forward(plain, x).shape(), forward(full, x).shape());
  EXPECT_EQ(plain.param("loc1.conv.weight").dim(1), 2);
  EXPECT_EQ(plain.param("loc2.conv.weight").dim(1), 3);
}

TEST(Aspp, OutputWidthIndependentOfRateCount) {
  for (auto rates : {std::vector<std::int64_t>{1}, std::vector<std::int64_t>{1, 2}, std::vector<std::int64_t>{1, 2, 3}}) {
    NetworkConfig c = NetworkConfig::plain_unet();
    c.base_channels = 2;
    c.depth = 2;
    c.aspp_rates = rates;
    const ModelState s = build(c, 5);
    EXPECT_EQ(aspp(s, random_tensor({1, 4, 8, 8}, 6)).shape(), (Shape{1, 4, 8, 8}));
  }
}

TEST(Aspp, RateTooLargeIsError) {
  NetworkConfig c = NetworkConfig::plain_unet();
  c.base_channels = 2;
  c.depth = 2;
  c.aspp_rates = {1, 4};
  const ModelState s = build(c, 5);
  try {
    aspp(s, random_tensor({1, 4, 4, 4}, 6));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("rate 4"), std::string::npos);
  }
}

TEST(Aspp, ImpulseResponseGrowsWithMaxRate) {
  for (std::int64_t r : {1, 2, 3, 5}) {
    NetworkConfig c = NetworkConfig::plain_unet();
    c.base_channels = 2;
    c.depth = 2;
    c.aspp_rates = r == 1 ? std::vector<std::int64_t>{1} : std::vector<std::int64_t>{1, r};
    ModelState s = build(c, 9);
    // Positive weights keep every ReLU active; the pooled branch is silenced
    // so only the atrous taps can carry a local impulse.
    for (auto& [name, t] : s.params) {
      for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, name.rfind("aspp.pool", 0) == 0 ? 0.0 : std::abs(t.at(i)) + 0.01);
    }
    const std::int64_t E = 15, ctr = 7;
    Tensor base = random_tensor({1, 4, E, E}, 10, 0.1, 1.0);
    Tensor bumped = base.clone();
    bumped.set(ctr * E + ctr, base.at(ctr * E + ctr) + 1.0);
    const Tensor d = ops::sub(aspp(s, bumped), aspp(s, base));
    std::int64_t extent = 0;
    for (std::int64_t i = 0; i < E; ++i)
      for (std::int64_t j = 0; j < E; ++j) {
        if (std::abs(d.at(i * E + j)) > 1e-12) extent = std::max({extent, std::abs(i - ctr), std::abs(j - ctr)});
      }
    EXPECT_EQ(extent, r);
  }
}

TEST(Forward, OutputShape) {
  const ModelState s = build(small_config(), 1);
  EXPECT_EQ(forward(s, random_tensor({2, 1, 32, 32}, 1)).shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(forward(s, random_tensor({1, 1, 16, 48}, 2)).shape(), (Shape{1, 3, 16, 48}));
}

TEST(Forward, DivisibilityErrorNamesPadding) {
  const ModelState s = build(small_config(), 1);
  try {
    forward(s, random_tensor({1, 1, 36, 32}, 1));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("pad by 12"), std::string::npos) << e.what();
  }
}

TEST(Forward, PlainConfigMatchesDirectOracle) {
  NetworkConfig c = NetworkConfig::plain_unet();
  c.base_channels = 2;
  c.aspp_rates = {1};
  const ModelState s = build(c, 11);
  Tensor x = random_tensor({2, 1, 32, 32}, 12);
  EXPECT_LE(max_abs_diff(forward(s, x), plain_unet_oracle(s, x)), 1e-12);
}

TEST(Forward, AllFlagsOffEqualsPlainUnet) {
  // Deformable blocks with pinned branches (zero offsets, saturated masks)
  // and every position flag off reduce to the plain UNet on shared weights.
  NetworkConfig c = NetworkConfig::plain_unet();
  c.base_channels = 2;
  c.aspp_rates = {1};
  c.deformable_blocks = {1, 2, 3};
  ModelState pinned = build(c, 21);
  for (auto& [name, t] : pinned.params) {
    if (name.find(".offset.bias") == std::string::npos) continue;
    for (std::int64_t i = 18; i < 27; ++i) t.set(i, 40.0);
  }
  NetworkConfig p = NetworkConfig::plain_unet();
  p.base_channels = 2;
  p.aspp_rates = {1};
  const ModelState plain = build(p, 21);
  for (const auto& [name, t] : plain.params) EXPECT_EQ(t.to_vector(), pinned.param(name).to_vector()) << name;
  Tensor x = random_tensor({2, 1, 32, 32}, 22);
  EXPECT_LE(max_abs_diff(forward(pinned, x), forward(plain, x)), 1e-10);
  EXPECT_LE(max_abs_diff(forward(pinned, x), plain_unet_oracle(plain, x)), 1e-10);
}

TEST(Forward, AblationVariantsRunForwardAndBackward) {
  struct Row {
    bool path, add_coord, coord_pool, plain;
  };
  for (const Row r : {Row{false, false, false, false}, Row{true, false, false, true}, Row{true, true, false, false},
                      Row{true, false, true, false}, Row{true, true, true, false}}) {
    NetworkConfig c = small_config();
    c.use_localization_path = r.path;
    c.use_add_coord = r.add_coord;
    c.use_coord_pool = r.coord_pool;
    c.plain_conv_path = r.plain;
    ModelState s = build(c, 4);
    Tensor labels = Tensor::zeros({2, 32, 32});
    for (std::int64_t i = 0; i < labels.numel(); ++i) labels.set(i, static_cast<double>(i % 3));
    Tensor loss = combined_loss(ops::softmax_channels(forward(s, random_tensor({2, 1, 32, 32}, 5))), labels,
                                LossConfig{}, LossPhase::FL);
    backward(loss);
    EXPECT_TRUE(s.param("head.weight").grad().defined());
    EXPECT_TRUE(s.param("enc0.conv1.weight").grad().defined());
    if (r.path) EXPECT_TRUE(s.param("loc1.conv.weight").grad().defined());
  }
}

TEST(Forward, PlainUnetIsTranslationEquivariantOnInterior) {
  // Max pooling makes the network equivariant only to shifts by multiples of
  // its total stride, so a (2,2) shift is exact for a single pooling level.
  // Content sits on a constant background, so every normalization statistic
  // is unchanged; pixels whose receptive field (radius 10 here) reaches the
  // border are skipped.
  NetworkConfig c = NetworkConfig::plain_unet();
  c.base_channels = 4;
  c.depth = 1;
  c.aspp_rates = {1};
  const ModelState s = build(c, 31);
  const std::int64_t E = 64, step = 2, margin = 12, K = 3;
  const Tensor content = random_tensor({24, 24}, 32, 0.0, 1.0);
  auto place = [&](std::int64_t off) {
    Tensor x = Tensor::zeros({1, 1, E, E});
    for (std::int64_t i = 0; i < 24; ++i)
      for (std::int64_t j = 0; j < 24; ++j) x.set((i + 20 + off) * E + j + 20 + off, content.at(i * 24 + j));
    return x;
  };
  const Tensor a = forward(s, place(0));
  const Tensor b = forward(s, place(step));
  const Tensor la = argmax_classes(a), lb = argmax_classes(b);
  for (std::int64_t i = margin; i < E - margin - step; ++i)
    for (std::int64_t j = margin; j < E - margin - step; ++j) {
      for (std::int64_t k = 0; k < K; ++k) {
        ASSERT_NEAR(a.at((k * E + i) * E + j), b.at((k * E + i + step) * E + j + step), 1e-9) << i << "," << j;
      }
      ASSERT_EQ(la.at(i * E + j), lb.at((i + step) * E + j + step));
    }
}

TEST(Forward, LossGradcheckOnSmallSample) {
  NetworkConfig c;
  c.base_channels = 2;
  c.depth = 3;
  c.deformable_blocks = {1, 2};
  c.localization_channels = 2;
  c.aspp_rates = {1};
  ModelState s = build(c, 41);
  // Move the deformable sampling points off the integer lattice, where the
  // bilinear interpolant is not differentiable.
  for (const char* p : {"enc1", "enc2", "dec1", "dec2"}) {
    Tensor w = s.param(std::string(p) + ".offset.weight");
    Tensor b = s.param(std::string(p) + ".offset.bias");
    const Tensor rw = random_tensor(w.shape(), 42, -0.05, 0.05);
    for (std::int64_t i = 0; i < w.numel(); ++i) w.set(i, rw.at(i));
    for (std::int64_t i = 0; i < 18; ++i) b.set(i, 0.3 + 0.02 * static_cast<double>(i));
  }
  Tensor image = random_tensor({1, 1, 16, 16}, 43, 0, 1);
  Tensor labels = Tensor::zeros({1, 16, 16});
  for (std::int64_t i = 0; i < 256; ++i) labels.set(i, static_cast<double>((i / 16 + i % 16) % 3));
  LossConfig lc;
  std::vector<std::string> names{"enc1.offset.weight", "enc1.conv1.weight", "loc1.conv.weight", "aspp.fuse.weight",
                                 "dec2.offset.bias", "head.weight"};
  std::vector<Tensor> inputs{image.set_requires_grad(true)};
  for (const auto& n : names) inputs.push_back(s.param(n));
  GradcheckOptions opts;
  opts.tolerance = 1e-3;
  opts.max_coords = 12;
  // Max pooling and ReLU switch within 1e-5 of some coordinates of this
  // sample; a smaller central step stays on one side of every kink.
  opts.step = 1e-6;
  const auto report = gradcheck(
      "network", [&](const std::vector<Tensor>& in) {
        return combined_loss(ops::softmax_channels(forward(s, in[0])), labels, lc, LossPhase::FL);
      },
      inputs, opts);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  const auto dir = std::filesystem::temp_directory_path() / "pgd_ckpt_roundtrip";
  std::filesystem::remove_all(dir);
  const ModelState s = build(small_config(), 51);
  save_checkpoint(s, dir, {{"adam.step", Tensor::scalar(3)}});
  std::map<std::string, Tensor> extra;
  const ModelState t = load_checkpoint(dir, &extra);
  EXPECT_EQ(t.config, s.config);
  EXPECT_EQ(extra.at("adam.step").item(), 3.0);
  Tensor x = random_tensor({1, 1, 32, 32}, 52);
  EXPECT_EQ(forward(s, x).to_vector(), forward(t, x).to_vector());
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, TamperedFingerprintIsCompatibilityError) {
  const auto dir = std::filesystem::temp_directory_path() / "pgd_ckpt_tamper";
  std::filesystem::remove_all(dir);
  save_checkpoint(build(small_config(), 1), dir);
  std::ifstream in(dir / "manifest.txt");
  std::stringstream ss;
  ss << in.rdbuf();
  in.close();
  std::string text = ss.str();
  text.replace(text.find("fingerprint ") + 12, 4, "ffff");
  std::ofstream(dir / "manifest.txt") << text;
  EXPECT_THROW(load_checkpoint(dir), CompatibilityError);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, MissingDirectoryIsIoError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/pgd/checkpoint"), IoError);
}

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <queue>
#include <set>

#include "pgd/data.hpp"
#include "pgd/metrics.hpp"

using namespace pgd;

namespace {

std::int64_t count_class(const Tensor& label, int k) {
  std::int64_t n = 0;
  for (std::int64_t i = 0; i < label.numel(); ++i) n += label.at(i) == k;
  return n;
}

// 8-connected components of the tumor class; true when each one touches an
// organ pixel.
bool every_tumor_component_touches_organ(const Tensor& label, std::int64_t H, std::int64_t W) {
  std::vector<char> seen(static_cast<std::size_t>(H * W), 0);
  for (std::int64_t s = 0; s < H * W; ++s) {
    if (label.at(s) != kTumor || seen[static_cast<std::size_t>(s)]) continue;
    bool touches = false;
    std::queue<std::int64_t> q;
    q.push(s);
    seen[static_cast<std::size_t>(s)] = 1;
    while (!q.empty()) {
      const std::int64_t p = q.front();
      q.pop();
      const std::int64_t y = p / W, x = p % W;
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dx = -1; dx <= 1; ++dx) {
          const std::int64_t yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
          const std::int64_t n = yy * W + xx;
          if (label.at(n) == kOrgan) touches = true;
          if (label.at(n) == kTumor && !seen[static_cast<std::size_t>(n)]) {
            seen[static_cast<std::size_t>(n)] = 1;
            q.push(n);
          }
        }
    }
    if (!touches) return false;
  }
  return true;
}

Tensor mask(std::initializer_list<double> v) {
  Tensor t = Tensor::zeros({static_cast<std::int64_t>(v.size())});
  std::int64_t i = 0;
  for (double x : v) t.set(i++, x);
  return t;
}

}  // namespace

TEST(Generate, DeterministicPerIndex) {
  GenConfig cfg;
  cfg.seed = 5;
  const auto a = generate(cfg, 6);
  const auto b = generate(cfg, 3);
  const SegSample c = generate_sample(cfg, 4);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].image.to_vector(), b[i].image.to_vector());
    EXPECT_EQ(a[i].label.to_vector(), b[i].label.to_vector());
  }
  EXPECT_EQ(a[4].image.to_vector(), c.image.to_vector());
  EXPECT_EQ(a[0].id, "s00000");
  cfg.seed = 6;
  EXPECT_NE(generate_sample(cfg, 0).image.to_vector(), a[0].image.to_vector());
}

TEST(Generate, TumorFractionStaysInBand) {
  GenConfig cfg;
  cfg.seed = 1;
  double total = 0.0;
  const auto samples = generate(cfg, 100);
  for (const auto& s : samples) {
    const double f = static_cast<double>(count_class(s.clean_label, kTumor)) / (64.0 * 64.0);
    EXPECT_DOUBLE_EQ(f, s.tumor_fraction);
    EXPECT_GE(f, 0.004) << s.id;
    EXPECT_LE(f, 0.03) << s.id;
    total += f;
  }
  const double mean = total / 100.0;
  EXPECT_GE(mean, 0.004);
  EXPECT_LE(mean, 0.03);
}

TEST(Generate, LabelsAreExclusiveAndTumorIsAttached) {
  GenConfig cfg;
  cfg.seed = 2;
  for (const auto& s : generate(cfg, 40)) {
    ASSERT_EQ(s.image.shape(), (Shape{1, 64, 64}));
    ASSERT_EQ(s.label.shape(), (Shape{64, 64}));
    for (std::int64_t i = 0; i < s.label.numel(); ++i) {
      const double v = s.label.at(i);
      ASSERT_TRUE(v == kBackground || v == kOrgan || v == kTumor);
      ASSERT_GE(s.image.at(i), 0.0);
      ASSERT_LE(s.image.at(i), 1.0);
      ASSERT_EQ(static_cast<double>(static_cast<float>(s.image.at(i))), s.image.at(i));
    }
    EXPECT_GT(count_class(s.label, kTumor), 0) << s.id;
    EXPECT_GT(count_class(s.label, kOrgan), 0) << s.id;
    EXPECT_TRUE(every_tumor_component_touches_organ(s.label, 64, 64)) << s.id;
  }
}

TEST(Generate, TumorIsBrighterThanWall) {
  GenConfig cfg;
  const SegSample s = generate_sample(cfg, 0);
  double tumor = 0, organ = 0;
  for (std::int64_t i = 0; i < 64 * 64; ++i) {
    if (s.label.at(i) == kTumor) tumor += s.image.at(i);
    if (s.label.at(i) == kOrgan) organ += s.image.at(i);
  }
  EXPECT_GT(tumor / static_cast<double>(count_class(s.label, kTumor)),
            organ / static_cast<double>(count_class(s.label, kOrgan)));
}

TEST(Generate, InfeasibleConfigsAreErrors) {
  GenConfig cfg;
  cfg.height = cfg.width = 16;
  cfg.tumor_fraction_min = 0.001;  // under 4 pixels at 16×16
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = GenConfig{};
  cfg.tumor_fraction_max = 0.2;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = GenConfig{};
  cfg.noise_rate = 1.5;
  try {
    cfg.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("noise_rate"), std::string::npos);
  }
  EXPECT_THROW(parse_noise_kind("salt"), ConfigError);
  EXPECT_EQ(parse_noise_kind(to_string(NoiseKind::random_flip)), NoiseKind::random_flip);
}

TEST(Noise, ZeroRateKeepsCleanLabels) {
  GenConfig cfg;
  cfg.noise_rate = 0.0;
  for (const auto& s : generate(cfg, 20)) {
    EXPECT_EQ(s.label.to_vector(), s.clean_label.to_vector());
    EXPECT_FALSE(s.noise_applied);
  }
}

TEST(Noise, FullRateMorphAlwaysChangesTumorArea) {
  GenConfig cfg;
  cfg.noise_rate = 1.0;
  cfg.seed = 3;
  for (const auto& s : generate(cfg, 50)) {
    EXPECT_TRUE(s.noise_applied);
    EXPECT_NE(count_class(s.label, kTumor), count_class(s.clean_label, kTumor)) << s.id;
    // Morphing only moves the tumor boundary.
    for (std::int64_t i = 0; i < s.label.numel(); ++i) {
      if (s.label.at(i) != s.clean_label.at(i)) {
        ASSERT_TRUE(s.label.at(i) == kTumor || s.clean_label.at(i) == kTumor);
      }
    }
  }
}

TEST(Noise, RandomFlipRateMatchesRhoInsideBand) {
  GenConfig cfg;
  cfg.seed = 4;
  const double rho = 0.3;
  std::int64_t band_total = 0, flipped = 0;
  for (const auto& clean : generate(cfg, 30)) {
    const SegSample s = inject_noise(clean, rho, NoiseKind::random_flip, 99);
    const auto band = boundary_band(s.clean_label);
    const std::set<std::int64_t> in_band(band.begin(), band.end());
    for (std::int64_t i = 0; i < s.label.numel(); ++i) {
      if (s.label.at(i) != s.clean_label.at(i)) ASSERT_TRUE(in_band.count(i)) << "flip outside band";
    }
    for (std::int64_t p : band) {
      if (s.clean_label.at(p) == kBackground) continue;
      ++band_total;
      flipped += s.label.at(p) != s.clean_label.at(p);
    }
    EXPECT_EQ(s.clean_label.to_vector(), clean.clean_label.to_vector());
  }
  ASSERT_GE(band_total, 1000);
  const double rate = static_cast<double>(flipped) / static_cast<double>(band_total);
  EXPECT_NEAR(rate, rho, 0.2 * rho);
}

TEST(Noise, InjectionIsDeterministic) {
  const SegSample clean = generate_sample(GenConfig{}, 3);
  for (auto kind : {NoiseKind::boundary_morph, NoiseKind::random_flip}) {
    EXPECT_EQ(inject_noise(clean, 0.7, kind, 5).label.to_vector(), inject_noise(clean, 0.7, kind, 5).label.to_vector());
  }
}

TEST(Dataset, SaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "pgd_dataset_roundtrip";
  std::filesystem::remove_all(dir);
  GenConfig cfg;
  cfg.noise_rate = 0.5;
  const auto samples = generate(cfg, 5);
  save_dataset(samples, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.tsv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "images" / "s00000.pgdt"));
  const auto loaded = load_dataset(dir);
  ASSERT_EQ(loaded.size(), samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(loaded[i].id, samples[i].id);
    EXPECT_EQ(loaded[i].image.to_vector(), samples[i].image.to_vector());
    EXPECT_EQ(loaded[i].label.to_vector(), samples[i].label.to_vector());
    EXPECT_EQ(loaded[i].clean_label.to_vector(), samples[i].clean_label.to_vector());
    EXPECT_EQ(loaded[i].noise_applied, samples[i].noise_applied);
  }
  std::filesystem::remove_all(dir);
  EXPECT_THROW(load_dataset(dir), IoError);
}

TEST(Dataset, BatchStacksSamples) {
  const auto samples = generate(GenConfig{}, 4);
  const Batch b = make_batch(samples, {2, 0}, DType::f32);
  EXPECT_EQ(b.images.shape(), (Shape{2, 1, 64, 64}));
  EXPECT_EQ(b.labels.shape(), (Shape{2, 64, 64}));
  EXPECT_EQ(b.images.dtype(), DType::f32);
  EXPECT_EQ(b.images.at(0), samples[2].image.at(0));
  EXPECT_EQ(b.labels.at(64 * 64 + 100), samples[0].label.at(100));
}

TEST(Metrics, DiceAndJaccardExamples) {
  const Tensor p = mask({1, 1, 0, 0}), t = mask({1, 0, 1, 0});
  EXPECT_DOUBLE_EQ(dsc(p, t, 1), 0.5);
  EXPECT_DOUBLE_EQ(jaccard(p, t, 1), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(dsc(p, p, 1), 1.0);
  EXPECT_DOUBLE_EQ(dsc(mask({0, 0}), mask({0, 0}), 2), 1.0);
  EXPECT_DOUBLE_EQ(dsc(mask({2, 0}), mask({0, 0}), 2), 0.0);
  EXPECT_DOUBLE_EQ(jaccard(mask({0, 0}), mask({0, 0}), 2), 1.0);
  EXPECT_THROW(dsc(mask({0}), mask({0, 0}), 1), ShapeError);
}

TEST(Metrics, JaccardIsMonotoneInDice) {
  std::uint64_t state = 17;
  for (int trial = 0; trial < 50; ++trial) {
    Tensor p = Tensor::zeros({64}), t = Tensor::zeros({64});
    for (std::int64_t i = 0; i < 64; ++i) {
      state = state * 6364136223846793005ULL + 1442695040888963407ULL;
      p.set(i, static_cast<double>((state >> 33) % 3));
      t.set(i, static_cast<double>((state >> 40) % 3));
    }
    for (int k = 0; k < 3; ++k) {
      const double d = dsc(p, t, k);
      EXPECT_NEAR(jaccard(p, t, k), d / (2.0 - d), 1e-12);
      EXPECT_DOUBLE_EQ(d, dsc(t, p, k));
    }
  }
}

TEST(Metrics, ArgmaxPicksLargestChannel) {
  Tensor logits = Tensor::zeros({1, 3, 1, 2});
  logits.set(0 * 2 + 0, 0.1);
  logits.set(1 * 2 + 0, 0.5);
  logits.set(2 * 2 + 1, 0.7);
  const Tensor a = argmax_classes(logits);
  EXPECT_EQ(a.shape(), (Shape{1, 1, 2}));
  EXPECT_EQ(a.at(0), 1.0);
  EXPECT_EQ(a.at(1), 2.0);
}

TEST(Metrics, MeanStdIsPopulation) {
  const MeanStd m = mean_std({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m.mean, 2.5);
  EXPECT_DOUBLE_EQ(m.std, std::sqrt(1.25));
  EXPECT_EQ(mean_std({}).mean, 0.0);
}

TEST(KFold, HundredItemsGiveTwentySixtyTwenty) {
  const auto folds = kfold_split(100, 5, 0);
  ASSERT_EQ(folds.size(), 5u);
  std::set<std::size_t> all_test;
  for (const auto& f : folds) {
    EXPECT_EQ(f.test.size(), 20u);
    EXPECT_EQ(f.train.size(), 60u);
    EXPECT_EQ(f.val.size(), 20u);
    std::set<std::size_t> u(f.test.begin(), f.test.end());
    u.insert(f.train.begin(), f.train.end());
    u.insert(f.val.begin(), f.val.end());
    EXPECT_EQ(u.size(), 100u);
    all_test.insert(f.test.begin(), f.test.end());
  }
  EXPECT_EQ(all_test.size(), 100u);
  EXPECT_EQ(kfold_split(100, 5, 0)[2].train, folds[2].train);
  EXPECT_NE(kfold_split(100, 5, 1)[0].test, folds[0].test);
}

TEST(KFold, TooFewItemsIsError) {
  EXPECT_THROW(kfold_split(4, 5, 0), ConfigError);
  EXPECT_THROW(kfold_split(10, 1, 0), ConfigError);
}

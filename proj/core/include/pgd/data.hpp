#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pgd/tensor.hpp"

namespace pgd {

enum class NoiseKind { boundary_morph, random_flip };
std::string to_string(NoiseKind kind);
NoiseKind parse_noise_kind(const std::string& text);

inline constexpr int kBackground = 0;
inline constexpr int kOrgan = 1;
inline constexpr int kTumor = 2;

// One synthetic slice: an elliptical wall (organ) with a tumor attached to
// its inner boundary.
struct SegSample {
  std::string id;
  Tensor image;        // 1×H×W intensities in [0, 1], f64
  Tensor label;        // H×W class indices (possibly noisy), f64
  Tensor clean_label;  // H×W noise-free class indices, f64
  double tumor_fraction = 0.0;  // of clean_label
  bool noise_applied = false;
};

struct GenConfig {
  std::int64_t height = 64;
  std::int64_t width = 64;
  // Band of the tumor's share of all pixels.
  double tumor_fraction_min = 0.006;
  double tumor_fraction_max = 0.02;
  double noise_rate = 0.0;
  NoiseKind noise_kind = NoiseKind::boundary_morph;
  std::uint64_t seed = 0;

  // Throws ConfigError naming the offending field, including a tumor band
  // that cannot be rendered at this resolution.
  void validate() const;
};

// Deterministic per (cfg.seed, index): sample i is identical no matter how
// many samples are requested. Noise is injected per cfg.noise_rate.
SegSample generate_sample(const GenConfig& cfg, std::int64_t index);
std::vector<SegSample> generate(const GenConfig& cfg, std::int64_t n);

// boundary_morph: with probability rho the tumor is dilated or eroded by
// 1-2 px (dilated pixels become tumor, eroded pixels become organ).
// random_flip: every pixel of the band dilate(T, 2) \ erode(T, 1) flips
// between tumor and organ with probability rho. clean_label is kept.
SegSample inject_noise(const SegSample& sample, double rho, NoiseKind kind, std::uint64_t seed);

// Pixels of the random_flip band of a label map.
std::vector<std::int64_t> boundary_band(const Tensor& label);

// Dataset directory: images/<id>.pgdt, labels/<id>.pgdt,
// clean_labels/<id>.pgdt and manifest.tsv (id, tumor_fraction, noise).
void save_dataset(const std::vector<SegSample>& samples, const std::filesystem::path& dir);
std::vector<SegSample> load_dataset(const std::filesystem::path& dir);

// Stacks samples into a B×1×H×W image batch and B×H×W label batches.
struct Batch {
  Tensor images;
  Tensor labels;
  Tensor clean_labels;
};
Batch make_batch(const std::vector<SegSample>& samples, const std::vector<std::size_t>& which, DType dtype);

}  // namespace pgd

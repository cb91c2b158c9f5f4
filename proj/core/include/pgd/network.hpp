#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pgd/tensor.hpp"

namespace pgd {

// Architecture of the position-guided deformable UNet. Encoder block i has
// base_channels << i channels; every encoder block is followed by a 2×2
// coordinate-preserving max pool, so the bottleneck runs at H / 2^depth.
struct NetworkConfig {
  std::int64_t in_channels = 1;
  std::int64_t num_classes = 3;
  std::int64_t base_channels = 16;
  std::int64_t depth = 4;
  // Indices of blocks (shared by encoder and decoder) whose first conv is
  // deformable.
  std::vector<std::int64_t> deformable_blocks{1, 2, 3};
  // One stride-2 dilated conv per rate; layer k guides block k.
  std::vector<std::int64_t> localization_dilations{2, 3, 5};
  std::int64_t localization_channels = 16;
  std::vector<std::int64_t> aspp_rates{1, 2, 3};
  bool use_localization_path = true;
  bool use_add_coord = true;
  bool use_coord_pool = true;
  // Localization path built from plain convolutions: it receives neither
  // the addCoord channels nor the CoordPool coordinates.
  bool plain_conv_path = false;

  // Plain UNet baseline: no deformable blocks, no localization path, no
  // coordinate channels anywhere.
  static NetworkConfig plain_unet();

  // Throws ConfigError naming the offending field.
  void validate() const;
  std::int64_t channels(std::int64_t block) const { return base_channels << block; }
  bool is_deformable(std::int64_t block) const;
  // Number of localization layers actually built.
  std::int64_t localization_layers() const;
  bool path_add_coord() const { return use_localization_path && use_add_coord && !plain_conv_path; }
  bool path_coords() const { return use_localization_path && use_coord_pool && !plain_conv_path; }
  bool has_guide(std::int64_t block) const;
  std::int64_t guide_channels(std::int64_t block) const;

  // Line-oriented key=value text; parse_canonical(canonical()) == *this.
  std::string canonical() const;
  static NetworkConfig parse_canonical(const std::string& text);
  // FNV-1a 64 of canonical().
  std::uint64_t fingerprint() const;
  bool operator==(const NetworkConfig&) const = default;
};

std::string fingerprint_hex(std::uint64_t fingerprint);

// Learnable weights keyed by layer name ("enc1.conv1.weight", ...), plus the
// configuration they were built for.
struct ModelState {
  NetworkConfig config;
  std::map<std::string, Tensor> params;

  const Tensor& param(const std::string& name) const;
  bool has(const std::string& name) const { return params.count(name) != 0; }
  std::int64_t parameter_count() const;
  std::uint64_t fingerprint() const { return config.fingerprint(); }
  DType dtype() const;
  // Deep copy with the same requires_grad flags.
  ModelState clone() const;
  ModelState to(DType dtype) const;
  void zero_grad();
};

// Deterministic initialization: He fan-in normal weights, zero biases, and
// zero offset/mask branches. Every layer draws from its own stream derived
// from (seed, layer name), so toggling one layer leaves the others intact.
ModelState build(const NetworkConfig& cfg, std::uint64_t seed, DType dtype = DType::f64);

// Guide maps for blocks 1..L computed from the first block's output and the
// CoordPool coordinates of blocks 0..L-1 (ignored when the path takes no
// coordinates). guides[k-1] has the spatial extent of block k's input.
std::vector<Tensor> localization_path(const ModelState& state, const Tensor& first_block_features,
                                      const std::vector<Tensor>& block_coords);

// Parallel atrous branches plus a global-average branch, fused by a 1×1
// conv. Spatial extent is preserved. Throws ShapeError when a rate is not
// smaller than the feature-map extent.
Tensor aspp(const ModelState& state, const Tensor& x);

// Logits B×K×H×W. H and W must be multiples of 2^depth.
Tensor forward(const ModelState& state, const Tensor& batch);

// Checkpoint directory: one PGDT file per tensor plus manifest.txt listing
// the fingerprint, the canonical config and "name shape file" per tensor.
void save_checkpoint(const ModelState& state, const std::filesystem::path& dir,
                     const std::map<std::string, Tensor>& extra = {});
ModelState load_checkpoint(const std::filesystem::path& dir, std::map<std::string, Tensor>* extra = nullptr);

}  // namespace pgd

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "pgd/data.hpp"
#include "pgd/network.hpp"
#include "pgd/trainer.hpp"

namespace pgd::cli {

// Which cross-validation fold a run trains on.
struct SplitConfig {
  std::size_t folds = 5;
  std::size_t fold = 0;
  std::uint64_t seed = 0;
};

// Variant × loss ablation sweep. epochs = 0 selects one third of train.epochs (rounded up).
struct AblateConfig {
  std::int64_t epochs = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> variants{"no_localization", "plain_conv", "coordconv", "coordpool", "full"};
  std::vector<std::string> losses{"FL", "NSFL", "FL+Dice", "NSFL+Dice"};
};

// One JSON file with sections network, train, data, loss, split, ablate.
// Every field is optional; unknown keys are rejected. The loss section
// feeds train.loss.
struct RunConfig {
  NetworkConfig network;
  TrainConfig train;
  GenConfig data;
  SplitConfig split;
  AblateConfig ablate;

  // Throws ConfigError naming the offending field.
  void validate() const;
  std::int64_t ablation_epochs() const;
};

// Calibrated desk-scale profile: the defaults with learning rate 1e-3.
RunConfig toy_profile();

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);

// Network flags for an ablation variant: no_localization, plain_conv, coordconv,
// coordpool or full.
NetworkConfig ablation_variant(const NetworkConfig& base, const std::string& name);
// Loss settings for an ablation loss: FL, NSFL, FL+Dice or NSFL+Dice.
LossConfig loss_variant(const LossConfig& base, const std::string& name);

DType parse_dtype(const std::string& text);

}  // namespace pgd::cli

#pragma once

#include <string>
#include <vector>

#include "pgd/data.hpp"
#include "pgd/metrics.hpp"
#include "pgd/trainer.hpp"
#include "run_config.hpp"

namespace pgd::cli {

// One training run of an ablation cell (variant × loss) on the configured fold.
struct RunOutcome {
  std::string variant;
  std::string loss;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> records;
  std::int64_t best_epoch = 0;
  double best_dsc_organ = 0.0;  // validation, best checkpoint
  double best_dsc_tumor = 0.0;
  // Validation DSC averaged over the last kTailEpochs epochs; a single
  // epoch swings by several DSC points under label noise.
  double final_dsc_organ = 0.0;
  double final_dsc_tumor = 0.0;
};

inline constexpr std::size_t kTailEpochs = 5;

Fold fold_of(const RunConfig& cfg, std::size_t n);

// Trains `variant` × `loss` from seed `seed` (weights and shuffling) for
// `epochs` epochs; the loss section of cfg supplies every other setting.
RunOutcome run_cell(const RunConfig& cfg, const std::vector<SegSample>& data, const std::string& variant,
                    const std::string& loss, std::uint64_t seed, std::int64_t epochs,
                    const EpochCallback& on_epoch = {});

// Mean validation loss over the last kTailEpochs epochs minus the run's
// minimum validation loss: how far the curve has climbed back up after
// its best point.
double post_minimum_rise(const std::vector<EpochRecord>& records);

double median(std::vector<double> v);

}  // namespace pgd::cli

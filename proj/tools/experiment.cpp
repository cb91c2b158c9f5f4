#include "experiment.hpp"

#include <algorithm>

namespace pgd::cli {

Fold fold_of(const RunConfig& cfg, std::size_t n) {
  return kfold_split(n, cfg.split.folds, cfg.split.seed).at(cfg.split.fold);
}

RunOutcome run_cell(const RunConfig& cfg, const std::vector<SegSample>& data, const std::string& variant,
                    const std::string& loss, std::uint64_t seed, std::int64_t epochs, const EpochCallback& on_epoch) {
  RunOutcome o;
  o.variant = variant;
  o.loss = loss;
  o.seed = seed;
  TrainConfig tc = cfg.train;
  tc.loss = loss_variant(cfg.train.loss, loss);
  tc.epochs = epochs;
  tc.seed = seed;
  const Fold fold = fold_of(cfg, data.size());
  const ModelState init = build(ablation_variant(cfg.network, variant), seed);
  const TrainResult r = train(init, data, fold.train, fold.val, tc, on_epoch);
  o.records = r.records;
  o.best_epoch = r.best_epoch;
  if (!r.records.empty()) {
    const std::size_t n = r.records.size(), k = std::min(kTailEpochs, n);
    for (std::size_t i = n - k; i < n; ++i) {
      o.final_dsc_organ += r.records[i].val_dsc.at(kOrgan) / static_cast<double>(k);
      o.final_dsc_tumor += r.records[i].val_dsc.at(kTumor) / static_cast<double>(k);
    }
    const auto& best = r.records.at(static_cast<std::size_t>(std::max<std::int64_t>(r.best_epoch, 1) - 1));
    o.best_dsc_organ = best.val_dsc.at(kOrgan);
    o.best_dsc_tumor = best.val_dsc.at(kTumor);
  }
  return o;
}

double post_minimum_rise(const std::vector<EpochRecord>& records) {
  if (records.empty()) return 0.0;
  double lo = records.front().val_loss;
  for (const auto& r : records) lo = std::min(lo, r.val_loss);
  const std::size_t n = records.size(), k = std::min(kTailEpochs, n);
  double tail = 0.0;
  for (std::size_t i = n - k; i < n; ++i) tail += records[i].val_loss / static_cast<double>(k);
  return tail - lo;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace pgd::cli

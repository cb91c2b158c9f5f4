#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "pgd/data.hpp"
#include "pgd/losses.hpp"
#include "pgd/network.hpp"

namespace pgd {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  std::int64_t batch_size = 8;
  std::int64_t epochs = 30;
  std::uint64_t seed = 0;
  LossConfig loss;
  AdamConfig adam;
  // The focal term may switch to NSFL only after this many epochs.
  std::int64_t min_epochs_before_switch = 3;
  // Global L2 norm limit on the gradient; 0 disables clipping.
  double grad_clip = 0.0;
  DType dtype = DType::f32;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

// First and second moment buffers plus the step counter.
struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::int64_t step = 0;

  // Checkpoint tensors ("adam.m.<name>", "adam.v.<name>", "adam.step").
  std::map<std::string, Tensor> to_tensors() const;
  static AdamState from_tensors(const std::map<std::string, Tensor>& tensors);
};

// One bias-corrected Adam update from the gradients held by the model's
// parameters (a missing gradient counts as zero). Throws NumericError
// naming the layer when a gradient is not finite.
void adam_step(ModelState& model, AdamState& state, const AdamConfig& cfg, double learning_rate);

struct EpochRecord {
  std::int64_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::vector<double> val_dsc;  // per class, against clean labels
  std::vector<double> val_jaccard;
  double mean_pt = 0.0;  // over training pixels of the epoch
  LossPhase phase = LossPhase::FL;
};

struct TrainResult {
  ModelState final_state;
  ModelState best_state;  // highest validation tumor DSC
  std::int64_t best_epoch = 0;
  AdamState adam;
  std::vector<EpochRecord> records;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Deterministic training: per epoch a seeded shuffle of train_ids, Adam
// steps on the combined loss, then validation on val_ids. The focal term
// latches to NSFL once an epoch's mean p_t reaches the switch threshold and
// min_epochs_before_switch epochs have run.
TrainResult train(const ModelState& initial, const std::vector<SegSample>& data,
                  const std::vector<std::size_t>& train_ids, const std::vector<std::size_t>& val_ids,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Per-sample DSC and Jaccard per class against clean labels.
struct EvalResult {
  std::vector<std::vector<double>> dsc;  // [class][sample]
  std::vector<std::vector<double>> jaccard;
};
EvalResult evaluate(const ModelState& model, const std::vector<SegSample>& data,
                    const std::vector<std::size_t>& ids, std::int64_t batch_size = 8);

inline constexpr const char* kMetricsHeader = "epoch,train_loss,val_loss,dsc_bg,dsc_organ,dsc_tumor,mean_pt,phase";
std::string metrics_csv(const std::vector<EpochRecord>& records);

}  // namespace pgd

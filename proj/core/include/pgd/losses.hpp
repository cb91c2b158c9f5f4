#pragma once

#include <span>
#include <string>
#include <vector>

#include "pgd/tensor.hpp"

namespace pgd {

enum class LossPhase { FL, NSFL };

std::string to_string(LossPhase phase);

// Lower bound applied to p_t before any logarithm.
inline constexpr double kProbabilityFloor = 1e-7;

struct LossConfig {
  double gamma = 2.0;    // focal exponent, >= 0
  double beta = 0.5;     // suppression exponent, in [0, 1]
  double epsilon = 0.2;  // NSFL threshold, in (0, 1)
  double lambda = 0.5;   // weight of the focal term against dice, in [0, 1]
  // Per-class multipliers of the focal term (background, organ, tumor).
  std::vector<double> class_weights{1.0, 1.0, 2.0};
  // Epoch-mean p_t at which training latches from FL to NSFL.
  double switch_threshold = 0.5;
  double dice_smooth = 1.0;
  // When false the focal term never switches to NSFL.
  bool noise_suppression = true;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Probability of the ground-truth class per pixel, floored at
// kProbabilityFloor. probs: B×K×H×W, labels: B×H×W -> B×H×W.
Tensor truth_probability(const Tensor& probs, const Tensor& labels);

// Per-pixel terms (same shape as p_t).
Tensor focal_terms(const Tensor& pt, double gamma);
Tensor nsfl_terms(const Tensor& pt, double gamma, double beta, double epsilon);

// Means over all pixels of -log p_t, the focal term, and the NSFL term.
Tensor ce_loss(const Tensor& pt);
Tensor focal_loss(const Tensor& pt, double gamma);
Tensor nsfl_loss(const Tensor& pt, double gamma, double beta, double epsilon);

// 1 - mean over foreground classes k >= 1 of
// (2 Σ p_k g_k + s) / (Σ p_k + Σ g_k + s), sums over batch and pixels.
Tensor dice_loss(const Tensor& probs, const Tensor& labels, double smooth = 1.0);

// λ · (class-weighted FL or NSFL) + (1 - λ) · dice. The focal term uses
// plain FL while `phase` is FL or noise suppression is disabled.
Tensor combined_loss(const Tensor& probs, const Tensor& labels, const LossConfig& cfg, LossPhase phase);

// Phase after each entry of a per-epoch mean-p_t history: NSFL from the
// first entry >= threshold onward, never reverting.
std::vector<LossPhase> switch_phases(std::span<const double> history, double threshold);

// Phase after the whole history. Throws Error on an empty history.
LossPhase switch_scheduler(std::span<const double> history, double threshold);

}  // namespace pgd

#include "pgd/losses.hpp"

#include <cmath>

#include "pgd/ops.hpp"

namespace pgd {

namespace {

void require_nonempty(const Tensor& pt, const char* op) {
  if (!pt.defined() || pt.numel() == 0) throw ShapeError(std::string(op) + ": empty input");
}

// Constant tensor with 1 where pt < epsilon.
Tensor below_threshold(const Tensor& pt, double epsilon) {
  Tensor m = Tensor::zeros(pt.shape(), pt.dtype());
  for (std::int64_t i = 0; i < pt.numel(); ++i) {
    if (pt.at(i) < epsilon) m.set(i, 1.0);
  }
  return m;
}

Tensor one_hot_plane(const Tensor& labels, std::int64_t k, DType dtype) {
  Tensor g = Tensor::zeros(labels.shape(), dtype);
  for (std::int64_t i = 0; i < labels.numel(); ++i) {
    if (static_cast<std::int64_t>(labels.at(i)) == k) g.set(i, 1.0);
  }
  return g;
}

}  // namespace

std::string to_string(LossPhase phase) { return phase == LossPhase::FL ? "FL" : "NSFL"; }

void LossConfig::validate() const {
  if (!(gamma >= 0.0)) throw ConfigError("loss.gamma must be >= 0");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("loss.beta must lie in [0, 1]");
  if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("loss.epsilon must lie in (0, 1)");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("loss.lambda must lie in [0, 1]");
  if (!(switch_threshold >= 0.0 && switch_threshold <= 1.0)) {
    throw ConfigError("loss.switch_threshold must lie in [0, 1]");
  }
  if (!(dice_smooth >= 0.0)) throw ConfigError("loss.dice_smooth must be >= 0");
  if (class_weights.empty()) throw ConfigError("loss.class_weights must not be empty");
  for (double w : class_weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss.class_weights entries must be finite and >= 0");
  }
}

Tensor truth_probability(const Tensor& probs, const Tensor& labels) {
  return ops::clamp_min(ops::gather_class(probs, labels), kProbabilityFloor);
}

Tensor focal_terms(const Tensor& pt, double gamma) {
  require_nonempty(pt, "focal_loss");
  Tensor p = ops::clamp_min(pt, kProbabilityFloor);
  Tensor nll = ops::neg(ops::log(p));
  if (gamma == 0.0) return nll;
  return ops::mul(ops::pow(ops::rsub(1.0, p), gamma), nll);
}

Tensor nsfl_terms(const Tensor& pt, double gamma, double beta, double epsilon) {
  require_nonempty(pt, "nsfl_loss");
  Tensor p = ops::clamp_min(pt, kProbabilityFloor);
  Tensor nll = ops::neg(ops::log(p));
  const double scale = std::pow(1.0 - epsilon, gamma) / std::pow(epsilon, beta);
  Tensor lower = ops::mul(ops::mul(ops::pow(p, beta), nll), scale);
  Tensor upper = gamma == 0.0 ? nll : ops::mul(ops::pow(ops::rsub(1.0, p), gamma), nll);
  // At p_t == epsilon the mask is 0, so the upper branch supplies the derivative.
  Tensor m = below_threshold(p, epsilon);
  Tensor keep_upper = ops::rsub(1.0, m);
  return ops::add(ops::mul(m, lower), ops::mul(keep_upper, upper));
}

Tensor ce_loss(const Tensor& pt) {
  require_nonempty(pt, "ce_loss");
  return ops::mean(ops::neg(ops::log(ops::clamp_min(pt, kProbabilityFloor))));
}

Tensor focal_loss(const Tensor& pt, double gamma) { return ops::mean(focal_terms(pt, gamma)); }

Tensor nsfl_loss(const Tensor& pt, double gamma, double beta, double epsilon) {
  return ops::mean(nsfl_terms(pt, gamma, beta, epsilon));
}

Tensor dice_loss(const Tensor& probs, const Tensor& labels, double smooth) {
  if (probs.ndim() != 4) throw ShapeError("dice_loss: expected B×K×H×W probabilities");
  const auto B = probs.dim(0), K = probs.dim(1), H = probs.dim(2), W = probs.dim(3);
  if (labels.shape() != Shape{B, H, W}) {
    throw ShapeError("dice_loss: labels shape " + to_string(labels.shape()) + " does not match " +
                     to_string(Shape{B, H, W}));
  }
  for (std::int64_t i = 0; i < labels.numel(); ++i) {
    const double v = labels.at(i);
    if (v < 0 || v >= static_cast<double>(K) || v != std::floor(v)) {
      throw DomainError("dice_loss: label " + std::to_string(v) + " at flat index " + std::to_string(i) +
                        " outside [0, " + std::to_string(K) + ")");
    }
  }
  if (K < 2) throw ShapeError("dice_loss: need at least one foreground class");
  const DType dt = probs.dtype();
  Tensor total;
  for (std::int64_t k = 1; k < K; ++k) {
    Tensor pk = ops::reshape(ops::slice_channels(probs, k, 1), {B, H, W});
    Tensor gk = one_hot_plane(labels, k, dt);
    double g_sum = 0.0;
    for (std::int64_t i = 0; i < gk.numel(); ++i) g_sum += gk.at(i);
    Tensor num = ops::add(ops::mul(ops::sum(ops::mul(pk, gk)), 2.0), smooth);
    Tensor den = ops::add(ops::sum(pk), g_sum + smooth);
    Tensor term = ops::div(num, den);
    total = total.defined() ? ops::add(total, term) : term;
  }
  return ops::rsub(1.0, ops::mul(total, 1.0 / static_cast<double>(K - 1)));
}

Tensor combined_loss(const Tensor& probs, const Tensor& labels, const LossConfig& cfg, LossPhase phase) {
  cfg.validate();
  const auto K = probs.dim(1);
  if (static_cast<std::int64_t>(cfg.class_weights.size()) < K) {
    throw ConfigError("loss.class_weights has " + std::to_string(cfg.class_weights.size()) + " entries for " +
                      std::to_string(K) + " classes");
  }
  Tensor pt = truth_probability(probs, labels);
  Tensor terms = (phase == LossPhase::NSFL && cfg.noise_suppression)
                     ? nsfl_terms(pt, cfg.gamma, cfg.beta, cfg.epsilon)
                     : focal_terms(pt, cfg.gamma);
  Tensor weights = Tensor::empty(pt.shape(), pt.dtype());
  double weight_sum = 0.0;
  for (std::int64_t i = 0; i < weights.numel(); ++i) {
    const double w = cfg.class_weights[static_cast<std::size_t>(labels.at(i))];
    weights.set(i, w);
    weight_sum += w;
  }
  if (weight_sum <= 0.0) throw ConfigError("loss.class_weights give zero total weight for this batch");
  Tensor focal = ops::mul(ops::sum(ops::mul(terms, weights)), 1.0 / weight_sum);
  if (cfg.lambda == 1.0) return focal;
  Tensor dice = dice_loss(probs, labels, cfg.dice_smooth);
  if (cfg.lambda == 0.0) return dice;
  return ops::add(ops::mul(focal, cfg.lambda), ops::mul(dice, 1.0 - cfg.lambda));
}

std::vector<LossPhase> switch_phases(std::span<const double> history, double threshold) {
  std::vector<LossPhase> phases;
  phases.reserve(history.size());
  LossPhase current = LossPhase::FL;
  for (double mean_pt : history) {
    if (mean_pt >= threshold) current = LossPhase::NSFL;
    phases.push_back(current);
  }
  return phases;
}

LossPhase switch_scheduler(std::span<const double> history, double threshold) {
  if (history.empty()) throw Error("switch_scheduler: empty mean-p_t history");
  return switch_phases(history, threshold).back();
}

}  // namespace pgd

#include "pgd/metrics.hpp"

#include <cmath>

#include "pgd/random.hpp"

namespace pgd {

namespace {

struct Counts {
  std::int64_t p = 0, t = 0, both = 0;
};

Counts count(const Tensor& pred, const Tensor& truth, int k) {
  if (pred.shape() != truth.shape()) {
    throw ShapeError("metric: prediction shape " + to_string(pred.shape()) + " differs from truth shape " +
                     to_string(truth.shape()));
  }
  Counts c;
  const double kd = static_cast<double>(k);
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const bool a = pred.at(i) == kd, b = truth.at(i) == kd;
    c.p += a;
    c.t += b;
    c.both += a && b;
  }
  return c;
}

}  // namespace

double dsc(const Tensor& pred, const Tensor& truth, int k) {
  const Counts c = count(pred, truth, k);
  if (c.p + c.t == 0) return 1.0;
  return 2.0 * static_cast<double>(c.both) / static_cast<double>(c.p + c.t);
}

double jaccard(const Tensor& pred, const Tensor& truth, int k) {
  const Counts c = count(pred, truth, k);
  const std::int64_t uni = c.p + c.t - c.both;
  if (uni == 0) return 1.0;
  return static_cast<double>(c.both) / static_cast<double>(uni);
}

Tensor argmax_classes(const Tensor& logits) {
  if (logits.ndim() != 4) throw ShapeError("argmax_classes: expected B×K×H×W, got " + to_string(logits.shape()));
  const std::int64_t B = logits.dim(0), K = logits.dim(1), P = logits.dim(2) * logits.dim(3);
  Tensor out = Tensor::zeros({B, logits.dim(2), logits.dim(3)});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t p = 0; p < P; ++p) {
      std::int64_t best = 0;
      double best_v = logits.at(b * K * P + p);
      for (std::int64_t k = 1; k < K; ++k) {
        const double v = logits.at((b * K + k) * P + p);
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      out.set(b * P + p, static_cast<double>(best));
    }
  return out;
}

MeanStd mean_std(const std::vector<double>& values) {
  MeanStd r;
  if (values.empty()) return r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(values.size()));
  return r;
}

std::vector<Fold> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("kfold_split: k must be >= 2");
  if (n < k) {
    throw ConfigError("kfold_split: " + std::to_string(n) + " items cannot fill " + std::to_string(k) + " folds");
  }
  const auto order = random::permutation(n, seed);
  std::vector<Fold> folds(k);
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t lo = f * n / k, hi = (f + 1) * n / k;
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < n; ++i) {
      if (i >= lo && i < hi) folds[f].test.push_back(order[i]);
      else rest.push_back(order[i]);
    }
    const auto shuffle = random::permutation(rest.size(), random::mix(seed, f + 1));
    const std::size_t n_train = (rest.size() * 3 + 2) / 4;
    for (std::size_t i = 0; i < rest.size(); ++i) {
      (i < n_train ? folds[f].train : folds[f].val).push_back(rest[shuffle[i]]);
    }
  }
  return folds;
}

}  // namespace pgd

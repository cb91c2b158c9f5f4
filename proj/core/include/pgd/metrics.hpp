#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pgd/tensor.hpp"

namespace pgd {

// 2|P∩T| / (|P| + |T|) over pixels equal to class k. 1 when both sets are
// empty, 0 when exactly one is.
double dsc(const Tensor& pred, const Tensor& truth, int k);
// |P∩T| / |P∪T|, same empty-set conventions.
double jaccard(const Tensor& pred, const Tensor& truth, int k);

// Per-pixel argmax over the class axis: B×K×H×W -> B×H×W.
Tensor argmax_classes(const Tensor& logits);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};
MeanStd mean_std(const std::vector<double>& values);

struct Fold {
  std::vector<std::size_t> test;
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

// Partitions item indices 0..n-1 into k test folds after a seeded shuffle;
// the remaining items of each fold split 75% train / 25% validation.
std::vector<Fold> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed);

}  // namespace pgd

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pgd/tensor.hpp"

namespace pgd {

struct GradcheckReport {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  bool passed = false;
};

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Caps the number of coordinates perturbed per input (evenly strided);
  // 0 checks every coordinate.
  std::size_t max_coords = 0;
};

// Compares the analytic gradient of a scalar function against central
// differences, coordinate by coordinate, for every tensor in `inputs`.
// Relative error is |g_an - g_fd| / max(|g_an|, |g_fd|, 1e-6).
// Inputs must be f64 leaves; they are mutated in place and restored.
GradcheckReport gradcheck(const std::string& name,
                          const std::function<Tensor(const std::vector<Tensor>&)>& f,
                          std::vector<Tensor> inputs, const GradcheckOptions& options = {});

// Single-input convenience overload.
GradcheckReport gradcheck(const std::string& name, const std::function<Tensor(const Tensor&)>& f,
                          Tensor x, const GradcheckOptions& options = {});

}  // namespace pgd

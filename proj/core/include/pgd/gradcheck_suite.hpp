#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pgd/gradcheck.hpp"

namespace pgd {

// One registered finite-difference check, parameterized by a seed that
// drives every random input it builds.
struct GradcheckEntry {
  std::string name;
  std::string suite;  // "ops", "losses" or "network"
  std::size_t seeds;  // seeds run by default
  std::function<GradcheckReport(std::uint64_t seed)> run;
};

const std::vector<GradcheckEntry>& gradcheck_registry();

// Worst result of one entry across its seeds.
struct SuiteResult {
  std::string name;
  std::string suite;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t seeds = 0;
  bool passed = false;
};

// suite ∈ {ops, losses, network, all}; ConfigError otherwise.
std::vector<SuiteResult> run_gradcheck_suite(const std::string& suite);

}  // namespace pgd

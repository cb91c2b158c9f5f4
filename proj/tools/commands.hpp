#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace pgd::cli {

// Process exit codes.
enum ExitCode : int {
  kOk = 0,
  kTestFailure = 1,
  kConfigError = 2,
  kIoError = 3,
  kNumericAbort = 4,
  kCompatibilityError = 5,
};

// Runs `pgd <command> [flags]` in-process. args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pgd::cli

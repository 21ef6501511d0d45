#pragma once

// The `mtsc` command line as a library call, so tests can drive it in-process.

#include <iosfwd>
#include <string>
#include <vector>

namespace mtsc::cli {

enum ExitCode : int {
  kOk = 0,
  kVerificationFailed = 1,
  kConfigError = 2,
  kDataError = 3,
  kDiverged = 4,
};

// `args` excludes the program name. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mtsc::cli

// SPDX-License-Identifier: Apache-2.0
//
// The mullama command line, callable in-process so tests can drive it.
#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mullama::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitConfig = 2,  // configuration or checkpoint problem
  kExitInput = 3,   // unreadable or invalid input data
  kExitBackend = 4,
};

// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mullama::cli

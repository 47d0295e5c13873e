#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gdnsq::cli {

enum ExitCode : int { kSuccess = 0, kRuntimeFailure = 1, kUsageError = 2, kCheckFailure = 3 };

// Parses `args` (without the program name) and runs the chosen subcommand.
int parse_and_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int parse_and_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gdnsq::cli

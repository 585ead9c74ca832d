#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace cryoar::cli {

/// Runs one subcommand; returns the process exit code
/// (0 success, 2 config, 3 I/O, 4 numerical failure).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cryoar::cli

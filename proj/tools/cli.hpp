#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cfm::cli {

enum ExitCode : int { ok = 0, failure = 1, config_error = 2, io_error = 3, numeric_error = 4 };

// Runs one command line (without the program name). Results go to `out`,
// diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cfm::cli

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cstalk::cli {

enum ExitCode : int { kOk = 0, kValidation = 1, kUsage = 2 };

/// Runs one subcommand. `args` excludes the program name. Results go to
/// `out`; the resolved configuration and progress go to `log`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& log);
int run(int argc, char** argv);

}  // namespace cstalk::cli

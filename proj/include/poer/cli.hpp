#pragma once

#include <iosfwd>

namespace poer {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitIo = 3,
  kExitDivergence = 4,
  kExitVersion = 5,
};

/// Runs the `gen | train | eval | audit | embed | gradcheck` command line and
/// returns its exit code. Diagnostics go to `err`, summaries to `out`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace poer

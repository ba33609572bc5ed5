#pragma once

#include <iosfwd>
#include <span>
#include <string>

namespace ulr::cli {

/// Runs the `ulr` command line (arguments without the program name). Reports, results and
/// help go to `out`; errors go to `err`. Returns the process exit status: nonzero exactly
/// when an error was reported.
int run(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace ulr::cli

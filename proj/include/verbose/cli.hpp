#pragma once

#include <iosfwd>

namespace verbose {

/// Entry point of the verbose_cli tool. Returns the process exit code; on
/// failure a JSON error record is written to <out>/error.json when an output
/// directory is known, and to `err` otherwise.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace verbose

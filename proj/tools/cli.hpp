#pragma once

#include <iosfwd>

namespace archscale::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInputError = 1;
inline constexpr int kExitCheckFailed = 2;

// Parses argv and runs one subcommand. Results go to stdout or to files named
// by flags; diagnostics and progress go to err.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace archscale::cli

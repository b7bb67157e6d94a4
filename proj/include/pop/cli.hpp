#pragma once

#include <iosfwd>

namespace pop {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

// Parses argv and runs one subcommand. Usage and configuration errors
// return kExitUsage with help on `err`; data, format and file errors
// return kExitData.
int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pop

#pragma once

#include <iosfwd>

namespace octvae::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Parses arguments and runs one subcommand. Returns the process exit code:
/// 0 on success, 1 on a runtime failure, 2 on a usage or configuration error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace octvae::cli

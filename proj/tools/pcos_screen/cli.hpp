#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pcos::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;    ///< usage or configuration error
inline constexpr int kExitRuntime = 3;  ///< training divergence or other runtime failure

/// Runs `pcos-screen` with `args` (excluding the program name).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pcos::cli

#pragma once

#include <filesystem>
#include <iosfwd>

namespace topoforge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Parses and runs one subcommand: optimize, dataset, train, sample, eval or
/// serve. Returns kExitOk, kExitUsage (bad flags or values) or kExitRuntime.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// $TOPOFORGE_DATA_DIR, else ./topoforge-data.
std::filesystem::path data_root();

}  // namespace topoforge::cli

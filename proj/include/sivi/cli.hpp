#pragma once

// Command-line entry point: simulate, fit, predict, score and replicate.

namespace sivi {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

/// Parses arguments, runs one command and returns the process exit code.
int run_cli(int argc, char** argv);

}  // namespace sivi

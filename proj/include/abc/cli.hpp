#pragma once

#include <string>
#include <vector>

namespace abc {

// Full pipeline entry point: parses argv, dispatches one subcommand, writes
// outputs (plus run_meta.json) under --out. Returns the process exit code:
// 0 success, 1 runtime failure, 2 usage, 3 invalid config (message names the
// offending field).
int run_cli(int argc, const char* const* argv);

// Convenience for tests: args without the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace abc

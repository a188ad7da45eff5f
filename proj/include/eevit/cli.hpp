#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace eevit {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

// Subcommands: train, eval, sweep, macs, analyze, gen-data. `args` excludes
// the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace eevit

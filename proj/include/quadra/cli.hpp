#pragma once

#include <exception>
#include <ostream>
#include <string>
#include <vector>

namespace quadra {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,      // usage or configuration error
  kExitDiverged = 2,   // numeric divergence
  kExitIo = 3,         // I/O, ingestion or integrity failure
};

/// Maps a library exception to the CLI exit code.
int exit_code_for(const std::exception& e);

/// `args` excludes the program name: {"train", "cfg.txt", ...}.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace quadra

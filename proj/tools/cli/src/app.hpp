#pragma once

#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace mad::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitOther = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumeric = 4,
  kExitIo = 5,
  kExitIntegrity = 6,
  kExitGeneration = 7,
};

/// Runs one command. `args` excludes the program name; `env` supplies the
/// MAD_<SECTION>_<KEY> layer. Never throws.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
            const std::map<std::string, std::string>& env);

}  // namespace mad::cli

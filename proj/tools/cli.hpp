#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dcr::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,    // bad flags, config or input files
  kRuntime = 2,  // failed trajectories / judge calls under --strict, transport failures
};

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dcr::cli

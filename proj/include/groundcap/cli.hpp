#ifndef GROUNDCAP_CLI_HPP_
#define GROUNDCAP_CLI_HPP_

#include <ostream>
#include <string>
#include <vector>

namespace groundcap {

enum ExitCode { kExitOk = 0, kExitUsage = 1, kExitDependency = 2, kExitRuntime = 3 };

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace groundcap

#endif  // GROUNDCAP_CLI_HPP_

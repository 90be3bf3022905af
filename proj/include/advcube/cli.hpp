#pragma once

#include <string>
#include <vector>

namespace advcube::cli {

/// Runs one subcommand. `args` excludes the program name. Returns 0 on
/// success, 1 on validation or runtime failure and 2 on usage errors.
int run(const std::vector<std::string>& args);
int run(int argc, const char* const* argv);

struct FlagInfo {
  std::string subcommand;
  std::string flag;
  std::string description;
};

/// Every long flag of every subcommand with its help text.
std::vector<FlagInfo> list_flags();
std::vector<std::string> subcommands();

/// The --help text of one subcommand.
std::string help(const std::string& subcommand);

}  // namespace advcube::cli

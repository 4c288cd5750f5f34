#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>

namespace xrag {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Parses a key-value config file: one `key = value` per line, `#` starts a
// comment. Later duplicates win.
std::map<std::string, std::string> read_config(const std::filesystem::path& path);

// Entry point of the xrag tool. Returns 0 on success, 1 on usage errors and 2
// on runtime errors.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace xrag

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace kgmod::cli {

// Exit codes: 0 success, 2 usage error, 3 config error, 4 data/format error,
// 5 numeric failure.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitData = 4;
constexpr int kExitNumeric = 5;

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace kgmod::cli

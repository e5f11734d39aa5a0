#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fuseclip {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitCompatibility = 4;

// Entry point of the fuseclip executable. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fuseclip

#pragma once

// Command-line front end. run() is the whole tool; main() only forwards argv.
//
// Exit codes: 0 success, 2 usage error, 3 input or validation error,
// 4 numerical or fit error, 1 unexpected internal error.

#include <iosfwd>
#include <string>
#include <vector>

namespace mnkit::cli {

inline constexpr int exit_ok = 0;
inline constexpr int exit_internal = 1;
inline constexpr int exit_usage = 2;
inline constexpr int exit_input = 3;
inline constexpr int exit_numerical = 4;

// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mnkit::cli

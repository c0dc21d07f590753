#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ptqlab::cli {

inline constexpr const char* tool_version = "0.1.0";

/// Runs one command line (args excludes the program name). Returns the
/// process exit code: 0 success, 2 validation error, 3 numeric failure,
/// 4 I/O failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ptqlab::cli

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dha::cli {

/// Environment variable naming the default output directory.
inline constexpr const char* kOutDirEnv = "DHA_OUT_DIR";

/// Parses arguments (argv[0] is the program name) and runs one command.
/// Returns the process exit status: 0 on success, 1 on a runtime failure,
/// 2 on invalid configuration, CLI11's code on a usage error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Same, with the arguments after the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dha::cli

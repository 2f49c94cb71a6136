#pragma once

#include <string>
#include <vector>

namespace chforge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitDomain = 2;

// Entry point shared by the binary and in-process callers; args[0] is the
// program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace chforge::cli

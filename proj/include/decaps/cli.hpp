#pragma once

#include <string>
#include <vector>

namespace decaps::cli {

// Entry point behind the `decaps` binary. Returns the process exit code:
// 0 success, 2 config error, 3 data error, 4 numeric failure, 1 otherwise.
int run(const std::vector<std::string>& args);

}  // namespace decaps::cli

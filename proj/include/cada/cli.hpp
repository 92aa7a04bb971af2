#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cada::cli {

// Exit codes: 0 success, 1 usage error, 2 data/validation error,
// 3 numerical failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace cada::cli

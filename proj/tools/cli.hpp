#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace evai::cli {

/// Runs one command. Returns 0 on success, 1 when the command failed (an
/// error line `{"error": {...}}` goes to `err`) and 2 on usage errors.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace evai::cli

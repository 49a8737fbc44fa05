#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace lipcert::cli {

/// Runs one CLI invocation. args excludes the program name.
/// Returns 0 on success, 1 on runtime failure, 2 on usage errors.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int dispatch(int argc, char** argv);

}  // namespace lipcert::cli

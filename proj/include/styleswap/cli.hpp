#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace styleswap {

/// Entry point of the styleswap tool. args excludes the program name.
/// Returns 0 on success, 1 on a runtime failure, 2 on a usage error.
int cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace styleswap

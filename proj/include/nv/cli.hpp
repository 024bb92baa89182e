#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace nv {

// The newvision command line. args excludes the program name. Results go to
// `out` as JSON; failures go to `err` as {"error": {...}}. Returns 0 on
// success, 2 on usage errors and 1 on runtime errors.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace nv

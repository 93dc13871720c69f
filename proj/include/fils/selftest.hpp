#pragma once

#include <ostream>

namespace fils {

// Fast invariant checks over every module; prints one line per check and
// returns true when all pass.
bool run_selftest(std::ostream& out);

}  // namespace fils

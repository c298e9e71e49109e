#pragma once

#include <string>

namespace cmvim::selftest {

// Runs the built-in oracle suites (scan vs recurrence, gradient checks, loss
// identities, file round-trips) printing one PASS/FAIL line per suite.
// Returns true when every suite passes. `fault_op`, when non-empty, perturbs
// that op's backward rule first (negative control).
bool run_all(const std::string& fault_op = "");

}  // namespace cmvim::selftest

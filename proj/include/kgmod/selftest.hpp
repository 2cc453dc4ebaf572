#pragma once

#include <iosfwd>
#include <string>

namespace kgmod::selftest {

// Built-in gradient and fixture checks, one status line per check.
// Returns 0 on success, 5 on a gradient/numeric failure, 4 on a fixture
// mismatch or missing data.
int run(std::ostream& out, const std::string& data_dir);

// SHA-256 hex of the rendered 8-shot preambles, pinned at transcription time.
extern const char* kTrueFalsePreambleSha256;
extern const char* kFeverPreambleSha256;

}  // namespace kgmod::selftest

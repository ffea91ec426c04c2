#pragma once

#include <string>
#include <vector>

namespace pes {

/// Exit codes: 0 success, 2 config, 3 argument, 4 shape, 5 numeric, 6 schema, 7 io, 8 state.
/// Failures print one JSON line `{"error":{"category":...,"message":...}}` on stderr.
int run_cli(const std::vector<std::string>& args);

}  // namespace pes

#pragma once

#include <string>
#include <vector>

namespace stickerlab {

// Dispatches one CLI invocation. Returns 0 on success, 1 on usage errors
// (bad flags, unknown subcommand, missing or malformed config), 2 on runtime
// failures. All randomness flows from --seed.
int run_cli(const std::vector<std::string>& args);

}  // namespace stickerlab

#pragma once

namespace cas::cli {

// Entry point of the `cassense` tool. Returns 0 on success, 1 on a usage
// error and 2 on a runtime failure.
int run(int argc, char** argv);

}  // namespace cas::cli

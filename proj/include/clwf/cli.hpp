#pragma once

namespace clwf {

// Command-line entry point. Returns 0 on success, 1 on validation or
// usage errors, 2 on runtime failures.
int run_cli(int argc, const char* const* argv);

} // namespace clwf

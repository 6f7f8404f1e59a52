#pragma once

#include <string>

namespace clwf {

enum class LogLevel { None = 0, Error = 1, Warn = 2, Info = 3, Debug = 4 };

// Verbosity comes from the CLWF_LOG environment variable
// (none|error|warn|info|debug); default warn. Output goes to stderr and
// never into artifact files.
LogLevel log_level();
void set_log_level(LogLevel level);

void log_error(const std::string& msg);
void log_warn(const std::string& msg);
void log_info(const std::string& msg);
void log_debug(const std::string& msg);

} // namespace clwf

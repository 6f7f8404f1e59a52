#include "clwf/log.hpp"

#include <cstdio>
#include <cstdlib>
#include <string>

namespace clwf {

namespace {

LogLevel parse_level(const char* s) {
    if (s == nullptr) {
        return LogLevel::Warn;
    }
    const std::string v(s);
    if (v == "none") return LogLevel::None;
    if (v == "error") return LogLevel::Error;
    if (v == "warn") return LogLevel::Warn;
    if (v == "info") return LogLevel::Info;
    if (v == "debug") return LogLevel::Debug;
    return LogLevel::Warn;
}

LogLevel& level_ref() {
    static LogLevel level = parse_level(std::getenv("CLWF_LOG"));
    return level;
}

void emit(LogLevel at, const char* tag, const std::string& msg) {
    if (level_ref() >= at) {
        std::fprintf(stderr, "[%s] %s\n", tag, msg.c_str());
    }
}

} // namespace

LogLevel log_level() { return level_ref(); }
void set_log_level(LogLevel level) { level_ref() = level; }

void log_error(const std::string& msg) { emit(LogLevel::Error, "error", msg); }
void log_warn(const std::string& msg) { emit(LogLevel::Warn, "warn", msg); }
void log_info(const std::string& msg) { emit(LogLevel::Info, "info", msg); }
void log_debug(const std::string& msg) { emit(LogLevel::Debug, "debug", msg); }

} // namespace clwf

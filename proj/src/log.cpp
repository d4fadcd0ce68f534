#include "octvae/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace octvae {

namespace {
std::atomic<LogLevel> current_level{LogLevel::Info};
std::mutex log_mutex;

void emit(LogLevel level, const char* tag, std::string_view message) {
    if (level < current_level.load()) return;
    std::lock_guard lock(log_mutex);
    std::cerr << '[' << tag << "] " << message << '\n';
}
} // namespace

void set_log_level(LogLevel level) { current_level = level; }
LogLevel log_level() { return current_level; }

void log_info(std::string_view message) { emit(LogLevel::Info, "info", message); }
void log_warning(std::string_view message) { emit(LogLevel::Warning, "warn", message); }
void log_error(std::string_view message) { emit(LogLevel::Error, "error", message); }

} // namespace octvae

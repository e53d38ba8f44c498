#include "error.hpp"

#include <iostream>
#include <mutex>

namespace hrgsdp {

namespace {

std::mutex& sink_mutex() {
    static std::mutex m;
    return m;
}

LogSink& sink() {
    static LogSink s = [](LogLevel level, const std::string& msg) {
        if (level == LogLevel::Warning) std::cerr << "hrgsdp: warning: " << msg << '\n';
    };
    return s;
}

}  // namespace

void set_log_sink(LogSink s) {
    std::lock_guard<std::mutex> lock(sink_mutex());
    sink() = std::move(s);
}

void log_message(LogLevel level, const std::string& msg) {
    std::lock_guard<std::mutex> lock(sink_mutex());
    if (sink()) sink()(level, msg);
}

}  // namespace hrgsdp

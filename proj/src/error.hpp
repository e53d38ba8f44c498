#pragma once

#include <functional>
#include <stdexcept>
#include <string>

namespace hrgsdp {

// Failure classes map one-to-one onto the C API status codes and CLI exit codes.
enum class ErrorKind { Usage = 1, Data = 2, Numerical = 3 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline Error usage_error(const std::string& msg) { return Error(ErrorKind::Usage, msg); }
inline Error data_error(const std::string& msg) { return Error(ErrorKind::Data, msg); }
inline Error numerical_error(const std::string& msg) { return Error(ErrorKind::Numerical, msg); }

enum class LogLevel { Info = 0, Warning = 1 };

using LogSink = std::function<void(LogLevel, const std::string&)>;

// Process-wide diagnostic sink. Defaults to stderr for warnings; info is dropped.
void set_log_sink(LogSink sink);
void log_message(LogLevel level, const std::string& msg);
inline void log_warning(const std::string& msg) { log_message(LogLevel::Warning, msg); }
inline void log_info(const std::string& msg) { log_message(LogLevel::Info, msg); }

}  // namespace hrgsdp

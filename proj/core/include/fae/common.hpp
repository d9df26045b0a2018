#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace fae {

// Error taxonomy. The CLI maps Config/Format/Usage to exit code 2 and
// Numeric/Training/Sampler to exit code 3.
enum class ErrorKind {
    Shape,
    Config,
    Numeric,
    Format,
    Usage,
    Training,
    Sampler,
    Matching,
    Io,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

inline Error shape_error(const std::string& msg)    { return Error(ErrorKind::Shape, msg); }
inline Error config_error(const std::string& msg)   { return Error(ErrorKind::Config, msg); }
inline Error numeric_error(const std::string& msg)  { return Error(ErrorKind::Numeric, msg); }
inline Error format_error(const std::string& msg)   { return Error(ErrorKind::Format, msg); }
inline Error usage_error(const std::string& msg)    { return Error(ErrorKind::Usage, msg); }
inline Error training_error(const std::string& msg) { return Error(ErrorKind::Training, msg); }
inline Error sampler_error(const std::string& msg)  { return Error(ErrorKind::Sampler, msg); }
inline Error matching_error(const std::string& msg) { return Error(ErrorKind::Matching, msg); }
inline Error io_error(const std::string& msg)       { return Error(ErrorKind::Io, msg); }

// Log levels selected by FAE_LOG={error,info,debug}; default info.
enum class LogLevel { Error = 0, Info = 1, Debug = 2 };

LogLevel log_level();

void log_msg(LogLevel level, const std::string& msg);

inline void log_error(const std::string& msg) { log_msg(LogLevel::Error, msg); }
inline void log_info(const std::string& msg)  { log_msg(LogLevel::Info, msg); }
inline void log_debug(const std::string& msg) { log_msg(LogLevel::Debug, msg); }

} // namespace fae

#include "fae/common.hpp"

#include <cstring>
#include <mutex>

namespace fae {

LogLevel log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("FAE_LOG");
        if (!env) return LogLevel::Info;
        if (std::strcmp(env, "error") == 0) return LogLevel::Error;
        if (std::strcmp(env, "debug") == 0) return LogLevel::Debug;
        return LogLevel::Info;
    }();
    return level;
}

void log_msg(LogLevel level, const std::string& msg) {
    if (level > log_level()) return;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    const char* tag = level == LogLevel::Error ? "error" : level == LogLevel::Info ? "info"
                                                                                   : "debug";
    std::fprintf(stderr, "[fae:%s] %s\n", tag, msg.c_str());
}

} // namespace fae

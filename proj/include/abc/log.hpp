#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace abc {

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

// ABC_LOG={error|info|debug}, default info.
inline LogLevel log_level() {
  const char* env = std::getenv("ABC_LOG");
  if (env == nullptr) return LogLevel::kInfo;
  if (std::strcmp(env, "error") == 0) return LogLevel::kError;
  if (std::strcmp(env, "debug") == 0) return LogLevel::kDebug;
  return LogLevel::kInfo;
}

inline void log_line(LogLevel level, const std::string& msg) {
  if (static_cast<int>(level) > static_cast<int>(log_level())) return;
  const char* tag = level == LogLevel::kError ? "error" : (level == LogLevel::kInfo ? "info" : "debug");
  std::fprintf(stderr, "[%s] %s\n", tag, msg.c_str());
}

}  // namespace abc

#pragma once

#include <functional>
#include <iostream>
#include <string>

namespace dualpert {

using LogSink = std::function<void(const std::string&)>;

/// Destination for warnings; defaults to stderr. Tests swap it to capture or
/// silence messages.
inline LogSink& warning_sink() {
  static LogSink sink = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
  return sink;
}

inline void log_warning(const std::string& msg) {
  if (warning_sink()) warning_sink()(msg);
}

}  // namespace dualpert

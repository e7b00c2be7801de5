#pragma once

#include <functional>
#include <string>

namespace pdq {

using LogSink = std::function<void(const std::string&)>;

/// Redirects warning output (default: stderr). Pass nullptr to restore.
void set_warn_sink(LogSink sink);
void log_warn(const std::string& msg);

}  // namespace pdq

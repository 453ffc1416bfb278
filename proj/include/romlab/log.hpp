#pragma once

#include <functional>
#include <iostream>
#include <string>

namespace romlab {

// Warnings go to a sink rather than into artifacts, so they never affect
// byte-identical outputs.
using LogSink = std::function<void(const std::string&)>;

inline LogSink stderr_sink() {
  return [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
}

inline LogSink null_sink() {
  return [](const std::string&) {};
}

}  // namespace romlab

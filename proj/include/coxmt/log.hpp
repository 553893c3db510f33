#pragma once

#include <functional>
#include <iostream>
#include <string>

namespace coxmt {

// Process-wide warning sink; stderr unless replaced (tests install a
// capturing sink, the CLI may silence it).
inline std::function<void(const std::string&)>& warning_sink() {
  static std::function<void(const std::string&)> sink = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
  return sink;
}

inline void warn(const std::string& message) {
  if (auto& s = warning_sink()) s(message);
}

}  // namespace coxmt

#pragma once

#include <atomic>
#include <cstddef>
#include <iostream>
#include <string>

namespace selfdet {

inline std::atomic<std::size_t>& warning_counter() {
  static std::atomic<std::size_t> count{0};
  return count;
}

inline bool& warnings_silenced() {
  static bool silenced = false;
  return silenced;
}

/// Warning on stderr; counted even when silenced.
inline void warn(const std::string& message) {
  ++warning_counter();
  if (!warnings_silenced()) std::cerr << "warning: " << message << '\n';
}

inline std::size_t warning_count() { return warning_counter().load(); }

}  // namespace selfdet

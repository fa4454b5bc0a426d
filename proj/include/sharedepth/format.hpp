#pragma once

#include <charconv>
#include <string>

namespace sharedepth {

/// Shortest decimal text that reads back to exactly `v`.
inline std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace sharedepth

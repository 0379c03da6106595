#pragma once

#include <cstdio>
#include <string>

namespace prunefuse {

// Locale-independent, deterministic text for CSV cells.
inline std::string format_double(double v, int digits = 12) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

}  // namespace prunefuse

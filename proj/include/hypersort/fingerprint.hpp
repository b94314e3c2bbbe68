#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace hypersort {

// 64-bit FNV-1a, rendered as 16 hex digits. Used to tie artifacts to the
// exact configuration and dataset that produced them.
inline std::string fingerprint(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace hypersort

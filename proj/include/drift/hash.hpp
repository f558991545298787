#pragma once

#include <cstdint>
#include <string>

namespace drift {

// FNV-1a, used to fingerprint configuration blobs inside artifacts.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string fnv1a64_hex(const std::string& s) {
  static const char* digits = "0123456789abcdef";
  std::uint64_t h = fnv1a64(s);
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

}  // namespace drift

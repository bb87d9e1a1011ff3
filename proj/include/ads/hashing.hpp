#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace ads {

inline uint64_t fnv1a64(std::string_view bytes, uint64_t seed = 0xcbf29ce484222325ULL) {
  uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64_extend(uint64_t h, std::string_view bytes) { return fnv1a64(bytes, h); }

std::string hex64(uint64_t v);
uint64_t hash_file(const std::string& path);

}  // namespace ads

#pragma once

#include <cstdint>
#include <cstring>

namespace scalenet {

// FNV-1a over raw bytes; used for cheap content checksums in tests and the
// frozen-backbone printouts.
inline std::uint64_t fnv1a64(const void* data, std::size_t bytes,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace scalenet

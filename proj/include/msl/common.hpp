#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>

namespace msl {

static_assert(std::endian::native == std::endian::little,
              "wire and checkpoint formats are little-endian; big-endian hosts unsupported");
static_assert(sizeof(float) == 4 && sizeof(double) == 8, "IEEE-754 float/double required");

// Error taxonomy. Callers catch the base or a specific kind.
struct config_error : std::runtime_error {
  explicit config_error(const std::string& m) : std::runtime_error(m) {}
};
struct input_error : std::runtime_error {
  explicit input_error(const std::string& m) : std::runtime_error(m) {}
};
struct invariant_error : std::runtime_error {
  explicit invariant_error(const std::string& m) : std::runtime_error(m) {}
};
struct protocol_error : std::runtime_error {
  explicit protocol_error(const std::string& m) : std::runtime_error(m) {}
};
struct io_error : std::runtime_error {
  explicit io_error(const std::string& m) : std::runtime_error(m) {}
};
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& m) : std::runtime_error(m) {}
};

/// FNV-1a over raw bytes; used for parameter trajectory checksums.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace msl

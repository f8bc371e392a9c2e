#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "trm/errors.hpp"

namespace trm {

// Little-endian binary stream helpers shared by the registry and checkpoint
// formats. Written byte-by-byte so files are identical across platforms.

inline void put_u8(std::ostream& out, uint8_t v) { out.put(static_cast<char>(v)); }

inline void put_u32(std::ostream& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::ostream& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_i32(std::ostream& out, int32_t v) { put_u32(out, static_cast<uint32_t>(v)); }

inline void put_f32(std::ostream& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  put_u32(out, bits);
}

inline uint8_t get_u8(std::istream& in) {
  const int c = in.get();
  if (c == EOF) raise(ErrorCode::IoError, "unexpected end of stream");
  return static_cast<uint8_t>(c);
}

inline uint32_t get_u32(std::istream& in) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(get_u8(in)) << (8 * i);
  return v;
}

inline uint64_t get_u64(std::istream& in) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(get_u8(in)) << (8 * i);
  return v;
}

inline int32_t get_i32(std::istream& in) { return static_cast<int32_t>(get_u32(in)); }

inline float get_f32(std::istream& in) {
  const uint32_t bits = get_u32(in);
  float v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

}  // namespace trm

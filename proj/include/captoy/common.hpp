#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace captoy {

// Base class for all errors thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad user input: out-of-range labels, incompatible shapes, invalid config.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed or truncated files (datasets, checkpoints, WAV).
struct DataError : Error {
  using Error::Error;
};

// Numeric failure during optimization (NaN gradients, diverged loss).
struct TrainingError : Error {
  using Error::Error;
};

// Shortest decimal form that round-trips a double bit-exactly.
inline std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

//============================================================================
// Little-endian binary IO (explicit byte order, independent of host)
//============================================================================

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& os, double x) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, 8);
  write_u64(os, bits);
}

// Tracks the byte offset so parse errors can point at the exact position.
class ByteReader {
 public:
  ByteReader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  std::uint64_t offset() const { return offset_; }

  void read_bytes(void* dst, std::size_t n) {
    is_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n)
      throw DataError("truncated " + what_ + " at byte " + std::to_string(offset_));
    offset_ += n;
  }

  std::uint16_t read_u16() {
    unsigned char b[2];
    read_bytes(b, 2);
    return static_cast<std::uint16_t>(b[0] | (static_cast<std::uint16_t>(b[1]) << 8));
  }

  std::uint32_t read_u32() {
    unsigned char b[4];
    read_bytes(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }

  std::uint64_t read_u64() {
    unsigned char b[8];
    read_bytes(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }

  double read_f64() {
    const std::uint64_t bits = read_u64();
    double x;
    std::memcpy(&x, &bits, 8);
    return x;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw DataError(msg + " in " + what_ + " at byte " + std::to_string(offset_));
  }

 private:
  std::istream& is_;
  std::string what_;
  std::uint64_t offset_ = 0;
};

}  // namespace captoy

#pragma once

// Binary array format shared by corpora, checkpoints, traces, and exported
// mels. A blob file is one or more arrays back to back, each framed as:
//
//   magic    8 bytes  "RVOXARR\0"
//   version  u32      format version, currently 1
//   dtype    u32      0 = f32, 1 = f64, 2 = i64
//   rank     u32      number of extents
//   checksum u64      FNV-1a over the payload bytes
//   extents  u64 * rank
//   payload  little-endian elements, row-major
//
// All multi-byte fields are little-endian.

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "resvox/tensor.hpp"

namespace resvox {

enum class Dtype : std::uint32_t { f32 = 0, f64 = 1, i64 = 2 };

namespace blob {

constexpr char kMagic[8] = {'R', 'V', 'O', 'X', 'A', 'R', 'R', '\0'};
constexpr std::uint32_t kVersion = 1;

inline std::uint64_t payload_checksum(const char* data, size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ull;
  }
  return h;
}

template <class T>
void append_raw(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

inline void append_header(std::string& out, Dtype dtype, const Shape& shape,
                          const char* payload, size_t payload_bytes) {
  out.append(kMagic, 8);
  append_raw<std::uint32_t>(out, kVersion);
  append_raw<std::uint32_t>(out, static_cast<std::uint32_t>(dtype));
  append_raw<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  append_raw<std::uint64_t>(out, payload_checksum(payload, payload_bytes));
  for (long e : shape) append_raw<std::uint64_t>(out, std::uint64_t(e));
}

inline void append_f64(std::string& out, const Shape& shape, const double* v) {
  size_t bytes = size_t(shape_numel(shape)) * sizeof(double);
  append_header(out, Dtype::f64, shape, reinterpret_cast<const char*>(v),
                bytes);
  out.append(reinterpret_cast<const char*>(v), bytes);
}

inline void append_i64(std::string& out, const Shape& shape, const long* v) {
  static_assert(sizeof(long) == 8, "i64 arrays assume 64-bit long");
  size_t bytes = size_t(shape_numel(shape)) * sizeof(long);
  append_header(out, Dtype::i64, shape, reinterpret_cast<const char*>(v),
                bytes);
  out.append(reinterpret_cast<const char*>(v), bytes);
}

inline void append_tensor(std::string& out, const Tensor& t) {
  append_f64(out, t.shape(), t.data());
}

struct Array {
  Dtype dtype = Dtype::f64;
  Shape shape;
  std::vector<double> f64;  // filled for f32/f64 (f32 widened)
  std::vector<long> i64;    // filled for i64
};

// Sequential reader over a blob buffer.
class Reader {
 public:
  Reader(const std::string& buf, std::string origin)
      : buf_(buf), origin_(std::move(origin)) {}

  bool done() const { return pos_ == buf_.size(); }

  Array next() {
    Array a;
    need(8 + 4 + 4 + 4 + 8, "header");
    if (std::memcmp(buf_.data() + pos_, kMagic, 8) != 0)
      fail(origin_, ": bad array magic");
    pos_ += 8;
    std::uint32_t version = take_u32();
    if (version != kVersion)
      fail(origin_, ": unsupported blob version ", version);
    std::uint32_t dtype = take_u32();
    if (dtype > 2) fail(origin_, ": unknown dtype code ", dtype);
    a.dtype = static_cast<Dtype>(dtype);
    std::uint32_t rank = take_u32();
    if (rank > 8) fail(origin_, ": implausible rank ", rank);
    std::uint64_t checksum = take_u64();
    need(size_t(rank) * 8, "extents");
    long n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      std::uint64_t e = take_u64();
      a.shape.push_back(long(e));
      n *= long(e);
    }
    size_t elem = a.dtype == Dtype::f32 ? 4 : 8;
    need(size_t(n) * elem, "payload (truncated blob)");
    const char* payload = buf_.data() + pos_;
    if (payload_checksum(payload, size_t(n) * elem) != checksum)
      fail(origin_, ": checksum mismatch, blob is corrupt");
    if (a.dtype == Dtype::i64) {
      a.i64.resize(size_t(n));
      std::memcpy(a.i64.data(), payload, size_t(n) * 8);
    } else if (a.dtype == Dtype::f64) {
      a.f64.resize(size_t(n));
      std::memcpy(a.f64.data(), payload, size_t(n) * 8);
    } else {
      a.f64.resize(size_t(n));
      for (long i = 0; i < n; ++i) {
        float f;
        std::memcpy(&f, payload + i * 4, 4);
        a.f64[size_t(i)] = double(f);
      }
    }
    pos_ += size_t(n) * elem;
    return a;
  }

  Tensor next_tensor() {
    Array a = next();
    if (a.dtype == Dtype::i64) fail(origin_, ": expected a real array");
    return Tensor::from(a.shape, std::move(a.f64));
  }

  std::vector<long> next_i64() {
    Array a = next();
    if (a.dtype != Dtype::i64) fail(origin_, ": expected an integer array");
    return std::move(a.i64);
  }

 private:
  void need(size_t bytes, const char* what) {
    if (buf_.size() - pos_ < bytes)
      fail(origin_, ": truncated blob while reading ", what);
  }
  std::uint32_t take_u32() {
    std::uint32_t v;
    std::memcpy(&v, buf_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::uint64_t take_u64() {
    std::uint64_t v;
    std::memcpy(&v, buf_.data() + pos_, 8);
    pos_ += 8;
    return v;
  }

  const std::string& buf_;
  std::string origin_;
  size_t pos_ = 0;
};

}  // namespace blob

}  // namespace resvox

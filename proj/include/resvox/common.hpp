#pragma once

// Shared plumbing: error helper, text conversions for manifests, global
// numeric options, seeded RNG streams.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace resvox {

namespace detail {
inline void msg_append(std::ostringstream&) {}
template <class T, class... Rest>
void msg_append(std::ostringstream& os, const T& head, const Rest&... rest) {
  os << head;
  msg_append(os, rest...);
}
}  // namespace detail

// Builds the message from the pieces and throws. All library errors funnel
// through here so tests can rely on std::runtime_error.
template <class... Args>
[[noreturn]] void fail(const Args&... args) {
  std::ostringstream os;
  detail::msg_append(os, args...);
  throw std::runtime_error(os.str());
}

template <class... Args>
void require(bool cond, const Args&... args) {
  if (!cond) fail(args...);
}

// deterministic: forces dropout to the identity and is the mode of record.
// strict_finite: every primitive validates its output and names itself on
// the first non-finite value it produces.
struct NumericOptions {
  bool deterministic = true;
  bool strict_finite = true;
};

inline NumericOptions& numeric_options() {
  static NumericOptions opts;
  return opts;
}

// splitmix64; small, portable, and plenty for init/shuffles/synthetic data.
struct Rng {
  std::uint64_t state;

  explicit Rng(std::uint64_t seed) : state(seed) {}

  std::uint64_t next_u64() {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  long uniform_int(long n) {
    if (n <= 0) fail("Rng::uniform_int: n must be positive, got ", n);
    return long(next_u64() % std::uint64_t(n));
  }
};

namespace detail {

// Hexfloat so manifests round-trip doubles exactly.
inline std::string double_to_text(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

inline double text_to_double(const std::string& s, const char* what) {
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') fail("cannot parse ", what, ": ", s);
  return v;
}

inline long text_to_long(const std::string& s, const char* what) {
  char* end = nullptr;
  long v = std::strtol(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0') fail("cannot parse ", what, ": ", s);
  return v;
}

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> parts;
  size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
    if (i > start) parts.push_back(line.substr(start, i - start));
  }
  return parts;
}

}  // namespace detail

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Stable per-purpose stream so construction order never shifts randomness.
inline Rng seeded_stream(std::uint64_t seed, const std::string& tag) {
  Rng mix(seed ^ fnv1a64(tag));
  return Rng(mix.next_u64());
}

}  // namespace resvox

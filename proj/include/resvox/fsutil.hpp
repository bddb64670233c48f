#pragma once

// Filesystem helpers: atomic writes (temp + rename) and whole-file reads.

#include <filesystem>
#include <fstream>
#include <string>

#include "resvox/common.hpp"

namespace resvox {

namespace fs = std::filesystem;

// Writes bytes to a sibling temp file and renames it over the target, so a
// crash never leaves a half-written file at the final path.
inline void atomic_write_file(const fs::path& target, const std::string& bytes) {
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open ", tmp.string(), " for writing");
    out.write(bytes.data(), long(bytes.size()));
    if (!out) fail("short write to ", tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) fail("rename ", tmp.string(), " -> ", target.string(), ": ",
               ec.message());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open ", path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

// Directory outputs are staged under a temp name and renamed into place once
// complete. The target must not already exist.
inline fs::path begin_atomic_dir(const fs::path& target) {
  if (fs::exists(target)) fail("output path already exists: ", target.string());
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  return tmp;
}

inline void commit_atomic_dir(const fs::path& tmp, const fs::path& target) {
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) fail("rename ", tmp.string(), " -> ", target.string(), ": ",
               ec.message());
}

}  // namespace resvox

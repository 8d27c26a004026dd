#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>

#include "neoward/common.hpp"

namespace testutil {

/// Scratch directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "nw") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / (tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::string str() const { return path_.string(); }

 private:
  std::filesystem::path path_;
};

inline std::array<std::uint8_t, 32> key_from(std::uint8_t seed) {
  std::array<std::uint8_t, 32> k{};
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = static_cast<std::uint8_t>(seed + 17 * i);
  return k;
}

inline neoward::ByteView view(const std::string& s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

/// Error code thrown by `fn`, or nullopt when it does not throw.
inline std::optional<neoward::ErrorCode> code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const neoward::Error& e) {
    return e.code();
  }
  return std::nullopt;
}

}  // namespace testutil

#pragma once

#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "doctest.h"
#include "nv/error.hpp"

namespace nv::testing {

// Runs fn and returns the code of the nv::Error it throws.
inline Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected nv::Error");
  return Errc::InvalidArgument;
}

// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("nv_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::remove_all(path);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace nv::testing

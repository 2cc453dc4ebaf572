#pragma once

#include <filesystem>
#include <string>

namespace testsupport {

// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    base_ = std::filesystem::temp_directory_path() /
            ("kgmod_test_" + tag + "_" + std::to_string(counter_++));
    std::filesystem::create_directories(base_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(base_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string path(const std::string& name) const { return (base_ / name).string(); }
  std::string root() const { return base_.string(); }

 private:
  static inline int counter_ = 0;
  std::filesystem::path base_;
};

}  // namespace testsupport

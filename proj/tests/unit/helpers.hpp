#pragma once

#include "stimseg/model.hpp"

#include <filesystem>
#include <string>

namespace stimseg::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

std::string read_file(const std::filesystem::path& path);

// Tiny model dimensions shared by the checks library.
ModelConfig small_config(Paradigm paradigm);
Vocabulary small_vocab();

// Zeroes every entry of the given parameters.
void zero(Tensor& t);

}  // namespace stimseg::testing

#include "helpers.hpp"

#include "stimseg/checks.hpp"

#include <atomic>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace stimseg::testing {

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("stimseg_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ModelConfig small_config(Paradigm paradigm) { return checks::tiny_config(paradigm); }

Vocabulary small_vocab() {
  std::vector<std::string> texts;
  for (int e = 0; e < kNumEmotions; ++e) {
    texts.push_back(explanation_for(EmotionId(e), ShapeKind::Circle));
    texts.push_back(explanation_for(EmotionId(e), ShapeKind::Square));
  }
  return model_vocabulary(texts);
}

void zero(Tensor& t) { t.mutable_value().setZero(); }

}  // namespace stimseg::testing

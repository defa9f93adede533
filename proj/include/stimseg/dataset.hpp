#pragma once

#include "stimseg/image.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace stimseg {

inline constexpr std::array<std::string_view, 8> kEmotionNames = {
    "amusement", "awe", "contentment", "excitement", "anger", "disgust", "fear", "sadness"};
inline constexpr int kNumEmotions = 8;

struct EmotionId {
  int value = 0;

  constexpr EmotionId() = default;
  constexpr explicit EmotionId(int v) : value(v) {}
  std::string_view name() const { return kEmotionNames.at(static_cast<std::size_t>(value)); }
  auto operator<=>(const EmotionId&) const = default;
};

std::optional<EmotionId> emotion_from_name(std::string_view name);

using TokenIds = std::vector<std::int64_t>;

// Lowercased words; every punctuation character is its own token.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kBos = 1;
  static constexpr std::int64_t kEos = 2;
  static constexpr std::int64_t kUnk = 3;

  Vocabulary();
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  std::optional<std::int64_t> lookup(std::string_view word) const;
  // Unknown words map to kUnk.
  std::int64_t id(std::string_view word) const;
  const std::string& token(std::int64_t id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool is_special(std::int64_t id) const { return id >= 0 && id <= kUnk; }

  // Words up to (not including) the first EOS; specials are skipped.
  std::string decode(std::span<const std::int64_t> ids) const;

  nlohmann::json to_json() const { return tokens_; }
  static Vocabulary from_json(const nlohmann::json& j);
  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void add(const std::string& word);
  std::vector<std::string> tokens_;
  std::map<std::string, std::int64_t, std::less<>> index_;
};

// Specials, then the eight emotion names in label order, then the remaining
// distinct tokens of `texts` and `extra_words` sorted lexicographically.
Vocabulary build_vocabulary(std::span<const std::string> texts,
                            std::span<const std::string> extra_words = {});

// BOS + words + EOS, truncated so the whole sequence has at most max_len ids
// and still ends with EOS.
TokenIds encode_explanation(std::string_view text, const Vocabulary& vocab, int max_len);

struct Sample {
  Image image;
  EmotionId emotion;
  BinaryMask mask;
  TokenIds tokens;
  std::string explanation;
  std::string image_path;  // manifest-relative, groups records of one image
  std::string split;

  bool operator==(const Sample&) const = default;
};

struct ManifestRecord {
  std::string image_path;
  std::string mask_path;
  std::string emotion;
  std::string explanation;
  std::string split;

  bool operator==(const ManifestRecord&) const = default;
};

struct Manifest {
  std::filesystem::path root;  // directory the record paths are relative to
  std::vector<ManifestRecord> records;

  std::vector<std::string> explanations() const;
};

class LoadError : public std::runtime_error {
 public:
  LoadError(std::size_t record, const std::string& what)
      : std::runtime_error("manifest record " + std::to_string(record) + ": " + what),
        record_(record) {}
  std::size_t record() const { return record_; }

 private:
  std::size_t record_;
};

// Parses the JSONL file; schema errors raise LoadError.
Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

// Decodes images and masks and tokenises explanations. `expected_size` > 0
// enforces square images of that side.
std::vector<Sample> load_samples(const Manifest& manifest, const Vocabulary& vocab, int max_len,
                                 int expected_size = 0);
std::vector<Sample> load_manifest(const std::filesystem::path& path, const Vocabulary& vocab,
                                  int max_len, int expected_size = 0);

// Records grouped by image, in first-appearance order.
struct ImageGroup {
  std::vector<std::size_t> sample_indices;
};
std::vector<ImageGroup> group_by_image(std::span<const Sample> samples);

// ---- synthetic corpus -------------------------------------------------------

enum class ShapeKind { Circle, Square, Triangle };
std::string_view shape_name(ShapeKind k);

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
};

// Integer geometry: circle radius `size`; square half-side `size`; triangle
// height `size` with the apex at (cx, cy - size / 2) and a 2:1 slope.
struct ShapeSpec {
  ShapeKind kind = ShapeKind::Circle;
  int cx = 0;
  int cy = 0;
  int size = 0;
  Rgb color;
  std::optional<EmotionId> emotion;  // none for distractors
};

std::string_view emotion_color_name(EmotionId e);
Rgb emotion_color(EmotionId e);
std::string explanation_for(EmotionId e, ShapeKind k);

// Scanline rasterisation of the shape's pixel-centre coverage.
BinaryMask rasterize(const ShapeSpec& shape, int height, int width);

struct SynthConfig {
  int image_size = 64;
  int per_emotion = 4;  // train records per emotion
  int val_per_emotion = 0;
  int test_per_emotion = 0;
  int emotions_per_image = 2;
  int max_distractors = 1;
};

struct SynthScene {
  std::string split;
  Image image;
  std::vector<ShapeSpec> shapes;
};

// Pure scene generation, deterministic in (config, seed).
std::vector<SynthScene> synthesize_scenes(const SynthConfig& config, std::uint64_t seed);

// Writes images/, masks/ and manifest.jsonl under `root`.
Manifest synthesize(const SynthConfig& config, std::uint64_t seed,
                    const std::filesystem::path& root);

}  // namespace stimseg

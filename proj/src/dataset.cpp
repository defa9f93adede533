#include "stimseg/dataset.hpp"

#include "stimseg/random.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace stimseg {

std::optional<EmotionId> emotion_from_name(std::string_view name) {
  for (int i = 0; i < kNumEmotions; ++i) {
    if (kEmotionNames[static_cast<std::size_t>(i)] == name) return EmotionId(i);
  }
  return std::nullopt;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

namespace {
constexpr std::array<const char*, 4> kSpecials = {"<pad>", "<bos>", "<eos>", "<unk>"};
}

Vocabulary::Vocabulary() {
  for (const char* s : kSpecials) add(s);
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
  if (tokens.size() < kSpecials.size()) throw std::invalid_argument("vocabulary lacks specials");
  for (std::size_t i = 0; i < kSpecials.size(); ++i) {
    if (tokens[i] != kSpecials[i]) throw std::invalid_argument("vocabulary specials out of order");
  }
  for (auto& t : tokens) {
    if (index_.count(t)) throw std::invalid_argument("duplicate vocabulary token " + t);
    add(t);
  }
}

void Vocabulary::add(const std::string& word) {
  if (index_.count(word)) return;
  index_.emplace(word, static_cast<std::int64_t>(tokens_.size()));
  tokens_.push_back(word);
}

std::optional<std::int64_t> Vocabulary::lookup(std::string_view word) const {
  const auto it = index_.find(word);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::int64_t Vocabulary::id(std::string_view word) const { return lookup(word).value_or(kUnk); }

const std::string& Vocabulary::token(std::int64_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocabulary::decode(std::span<const std::int64_t> ids) const {
  std::string out;
  for (const auto id : ids) {
    if (id == kEos) break;
    if (is_special(id)) continue;
    if (!out.empty()) out.push_back(' ');
    out += token(id);
  }
  return out;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  return Vocabulary(j.get<std::vector<std::string>>());
}

Vocabulary build_vocabulary(std::span<const std::string> texts,
                            std::span<const std::string> extra_words) {
  Vocabulary v;
  std::vector<std::string> words;
  for (const auto name : kEmotionNames) words.emplace_back(name);
  std::set<std::string> rest;
  for (const auto& t : texts)
    for (auto& w : tokenize(t)) rest.insert(std::move(w));
  for (const auto& w : extra_words)
    for (auto& t : tokenize(w)) rest.insert(std::move(t));
  for (const auto name : kEmotionNames) rest.erase(std::string(name));
  for (const auto* s : kSpecials) rest.erase(s);
  words.insert(words.end(), rest.begin(), rest.end());
  std::vector<std::string> all(kSpecials.begin(), kSpecials.end());
  all.insert(all.end(), words.begin(), words.end());
  return Vocabulary(std::move(all));
}

TokenIds encode_explanation(std::string_view text, const Vocabulary& vocab, int max_len) {
  const auto words = tokenize(text);
  TokenIds ids{Vocabulary::kBos};
  const std::size_t room = static_cast<std::size_t>(std::max(0, max_len - 2));
  for (std::size_t i = 0; i < words.size() && i < room; ++i) ids.push_back(vocab.id(words[i]));
  ids.push_back(Vocabulary::kEos);
  return ids;
}

std::vector<std::string> Manifest::explanations() const {
  std::vector<std::string> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.explanation);
  return out;
}

namespace {

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  std::string line;
  std::size_t index = 0;
  while (std::getline(in, line)) {
    if (blank(line)) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw LoadError(index, std::string("malformed JSON: ") + e.what());
    }
    ManifestRecord r;
    for (const char* key : {"image_path", "mask_path", "emotion", "explanation", "split"}) {
      if (!j.contains(key) || !j[key].is_string()) {
        throw LoadError(index, std::string("missing string field '") + key + "'");
      }
    }
    r.image_path = j["image_path"];
    r.mask_path = j["mask_path"];
    r.emotion = j["emotion"];
    r.explanation = j["explanation"];
    r.split = j["split"];
    if (!emotion_from_name(r.emotion)) {
      throw LoadError(index, "unknown emotion '" + r.emotion + "' (" + r.image_path + ")");
    }
    if (r.split != "train" && r.split != "val" && r.split != "test") {
      throw LoadError(index, "unknown split '" + r.split + "'");
    }
    if (tokenize(r.explanation).empty()) {
      throw LoadError(index, "empty explanation (" + r.image_path + ")");
    }
    m.records.push_back(std::move(r));
    ++index;
  }
  return m;
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  for (const auto& r : manifest.records) {
    nlohmann::ordered_json j;
    j["image_path"] = r.image_path;
    j["mask_path"] = r.mask_path;
    j["emotion"] = r.emotion;
    j["explanation"] = r.explanation;
    j["split"] = r.split;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("failed writing manifest " + path.string());
}

std::vector<Sample> load_samples(const Manifest& manifest, const Vocabulary& vocab, int max_len,
                                 int expected_size) {
  std::vector<Sample> out;
  out.reserve(manifest.records.size());
  std::map<std::string, Image> image_cache;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    const auto emotion = emotion_from_name(r.emotion);
    if (!emotion) throw LoadError(i, "unknown emotion '" + r.emotion + "'");
    if (tokenize(r.explanation).empty()) throw LoadError(i, "empty explanation");
    const auto image_file = manifest.root / r.image_path;
    const auto mask_file = manifest.root / r.mask_path;
    if (!std::filesystem::exists(image_file)) {
      throw LoadError(i, "missing image file " + image_file.string());
    }
    if (!std::filesystem::exists(mask_file)) {
      throw LoadError(i, "missing mask file " + mask_file.string());
    }
    Sample s;
    try {
      auto it = image_cache.find(r.image_path);
      if (it == image_cache.end()) {
        it = image_cache.emplace(r.image_path, read_png_rgb(image_file)).first;
      }
      s.image = it->second;
      s.mask = read_png_mask(mask_file);
    } catch (const ImageIoError& e) {
      throw LoadError(i, e.what());
    }
    if (s.mask.height != s.image.height || s.mask.width != s.image.width) {
      throw LoadError(i, "mask and image sizes differ");
    }
    if (expected_size > 0 && (s.image.height != expected_size || s.image.width != expected_size)) {
      throw LoadError(i, "image is " + std::to_string(s.image.height) + "x" +
                             std::to_string(s.image.width) + ", model expects " +
                             std::to_string(expected_size));
    }
    s.emotion = *emotion;
    s.tokens = encode_explanation(r.explanation, vocab, max_len);
    s.explanation = r.explanation;
    s.image_path = r.image_path;
    s.split = r.split;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Sample> load_manifest(const std::filesystem::path& path, const Vocabulary& vocab,
                                  int max_len, int expected_size) {
  return load_samples(read_manifest(path), vocab, max_len, expected_size);
}

std::vector<ImageGroup> group_by_image(std::span<const Sample> samples) {
  std::vector<ImageGroup> groups;
  std::map<std::string, std::size_t> where;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto [it, fresh] = where.emplace(samples[i].image_path, groups.size());
    if (fresh) groups.emplace_back();
    groups[it->second].sample_indices.push_back(i);
  }
  return groups;
}

// ---- synthetic corpus -------------------------------------------------------

std::string_view shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
  }
  return "?";
}

namespace {

struct EmotionStyle {
  const char* color_name;
  Rgb color;
  const char* pattern;  // {c} colour word, {s} shape word
};

constexpr std::array<EmotionStyle, 8> kStyles = {{
    {"yellow", {235, 215, 40}, "the {c} {s} looks playful and gives me amusement"},
    {"purple", {130, 55, 190}, "i feel awe before the towering {c} {s}"},
    {"green", {50, 165, 70}, "the calm {c} {s} brings me contentment"},
    {"orange", {245, 125, 20}, "the bright {c} {s} sparks my excitement"},
    {"red", {210, 25, 30}, "the harsh {c} {s} stirs anger in me"},
    {"brown", {110, 65, 25}, "the murky {c} {s} makes me feel disgust"},
    {"black", {20, 20, 25}, "the {c} {s} fills me with fear"},
    {"blue", {35, 75, 215}, "the lonely {c} {s} leaves me in sadness"},
}};

constexpr std::array<Rgb, 2> kDistractorColors = {{{245, 245, 240}, {120, 120, 125}}};

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

struct Box {
  int x0, y0, x1, y1;  // half-open
};

Box bounds(const ShapeSpec& s) {
  switch (s.kind) {
    case ShapeKind::Circle:
    case ShapeKind::Square:
      return {s.cx - s.size, s.cy - s.size, s.cx + s.size, s.cy + s.size};
    case ShapeKind::Triangle: {
      const int top = s.cy - s.size / 2;
      const int half = s.size / 2 + 1;
      return {s.cx - half, top, s.cx + half, top + s.size};
    }
  }
  return {};
}

bool separated(const Box& a, const Box& b, int margin) {
  return a.x1 + margin <= b.x0 || b.x1 + margin <= a.x0 || a.y1 + margin <= b.y0 ||
         b.y1 + margin <= a.y0;
}

int scaled(int v, double scale) { return std::max(1, static_cast<int>(std::lround(v * scale))); }

// Returns false when no free spot was found.
bool place(ShapeSpec& s, std::vector<Box>& taken, int image_size, Rng& rng) {
  for (int attempt = 0; attempt < 400; ++attempt) {
    s.cx = static_cast<int>(rng.uniform_int(0, image_size - 1));
    s.cy = static_cast<int>(rng.uniform_int(0, image_size - 1));
    const Box b = bounds(s);
    if (b.x0 < 1 || b.y0 < 1 || b.x1 > image_size - 1 || b.y1 > image_size - 1) continue;
    bool ok = true;
    for (const auto& t : taken) ok = ok && separated(b, t, 2);
    if (ok) {
      taken.push_back(b);
      return true;
    }
  }
  return false;
}

std::vector<std::vector<EmotionId>> pack_emotions(int per_emotion, int per_image, Rng& rng) {
  std::vector<EmotionId> slots;
  for (int e = 0; e < kNumEmotions; ++e)
    for (int k = 0; k < per_emotion; ++k) slots.emplace_back(e);
  rng.shuffle(slots.begin(), slots.end());
  std::vector<std::vector<EmotionId>> images;
  while (!slots.empty()) {
    std::vector<EmotionId> group{slots.front()};
    slots.erase(slots.begin());
    while (static_cast<int>(group.size()) < per_image) {
      auto it = std::find_if(slots.begin(), slots.end(), [&](EmotionId e) {
        return std::find(group.begin(), group.end(), e) == group.end();
      });
      if (it == slots.end()) break;
      group.push_back(*it);
      slots.erase(it);
    }
    images.push_back(std::move(group));
  }
  return images;
}

SynthScene make_scene(const std::vector<EmotionId>& emotions, int image_size, int max_distractors,
                      Rng& rng) {
  const double scale = image_size / 64.0;
  for (;;) {
    SynthScene scene;
    std::vector<Box> taken;
    bool ok = true;
    for (const EmotionId e : emotions) {
      ShapeSpec s;
      s.kind = static_cast<ShapeKind>(rng.uniform_int(0, 2));
      switch (s.kind) {
        case ShapeKind::Circle: s.size = scaled(static_cast<int>(rng.uniform_int(10, 13)), scale); break;
        case ShapeKind::Square: s.size = scaled(static_cast<int>(rng.uniform_int(9, 12)), scale); break;
        case ShapeKind::Triangle: s.size = scaled(static_cast<int>(rng.uniform_int(20, 26)), scale); break;
      }
      s.color = emotion_color(e);
      s.emotion = e;
      ok = ok && place(s, taken, image_size, rng);
      scene.shapes.push_back(s);
    }
    const int distractors = static_cast<int>(rng.uniform_int(0, max_distractors));
    for (int d = 0; d < distractors && ok; ++d) {
      ShapeSpec s;
      s.kind = static_cast<ShapeKind>(rng.uniform_int(0, 2));
      s.size = s.kind == ShapeKind::Triangle ? scaled(static_cast<int>(rng.uniform_int(8, 12)), scale)
                                             : scaled(static_cast<int>(rng.uniform_int(4, 6)), scale);
      s.color = kDistractorColors[static_cast<std::size_t>(rng.uniform_int(0, 1))];
      // A crowded canvas simply drops the distractor.
      if (place(s, taken, image_size, rng)) scene.shapes.push_back(s);
    }
    if (!ok) continue;

    // Textured background: diagonal stripes plus per-pixel grain.
    Image img(image_size, image_size);
    const double phase = rng.uniform(0.0, 6.283185307179586);
    const double period = rng.uniform(10.0, 20.0) * scale;
    for (int y = 0; y < image_size; ++y) {
      for (int x = 0; x < image_size; ++x) {
        const double stripe = 12.0 * std::sin(6.283185307179586 * (x + y) / period + phase);
        const double grain = rng.uniform(-6.0, 6.0);
        const double base[3] = {196.0, 186.0, 168.0};
        for (int c = 0; c < 3; ++c) {
          img.at(y, x, c) = to_byte((base[c] + stripe + grain) / 255.0) / 255.0;
        }
      }
    }
    for (const auto& s : scene.shapes) {
      const BinaryMask m = rasterize(s, image_size, image_size);
      const double jitter[3] = {rng.uniform(-6.0, 6.0), rng.uniform(-6.0, 6.0), rng.uniform(-6.0, 6.0)};
      const double rgb[3] = {static_cast<double>(s.color.r), static_cast<double>(s.color.g),
                             static_cast<double>(s.color.b)};
      for (int y = 0; y < image_size; ++y) {
        for (int x = 0; x < image_size; ++x) {
          if (!m.at(y, x)) continue;
          const double grain = rng.uniform(-4.0, 4.0);
          for (int c = 0; c < 3; ++c) {
            img.at(y, x, c) = to_byte((rgb[c] + jitter[c] + grain) / 255.0) / 255.0;
          }
        }
      }
    }
    scene.image = std::move(img);
    return scene;
  }
}

}  // namespace

std::string_view emotion_color_name(EmotionId e) {
  return kStyles.at(static_cast<std::size_t>(e.value)).color_name;
}

Rgb emotion_color(EmotionId e) { return kStyles.at(static_cast<std::size_t>(e.value)).color; }

std::string explanation_for(EmotionId e, ShapeKind k) {
  std::string s = kStyles.at(static_cast<std::size_t>(e.value)).pattern;
  replace_all(s, "{c}", emotion_color_name(e));
  replace_all(s, "{s}", shape_name(k));
  return s;
}

BinaryMask rasterize(const ShapeSpec& shape, int height, int width) {
  BinaryMask m(height, width);
  auto fill_row = [&](int y, int x_lo, int x_hi) {
    if (y < 0 || y >= height) return;
    for (int x = std::max(0, x_lo); x <= std::min(width - 1, x_hi); ++x) m.at(y, x) = 1;
  };
  const double cx = shape.cx;
  switch (shape.kind) {
    case ShapeKind::Circle: {
      const double r2 = static_cast<double>(shape.size) * shape.size;
      for (int y = shape.cy - shape.size; y < shape.cy + shape.size; ++y) {
        const double dy = y + 0.5 - shape.cy;
        if (dy * dy > r2) continue;
        const double half = std::sqrt(r2 - dy * dy);
        fill_row(y, static_cast<int>(std::ceil(cx - half - 0.5)),
                 static_cast<int>(std::floor(cx + half - 0.5)));
      }
      break;
    }
    case ShapeKind::Square:
      for (int y = shape.cy - shape.size; y < shape.cy + shape.size; ++y) {
        fill_row(y, shape.cx - shape.size, shape.cx + shape.size - 1);
      }
      break;
    case ShapeKind::Triangle: {
      const int top = shape.cy - shape.size / 2;
      for (int y = top; y < top + shape.size; ++y) {
        const double half = (y + 0.5 - top) / 2.0;
        fill_row(y, static_cast<int>(std::ceil(cx - half - 0.5)),
                 static_cast<int>(std::floor(cx + half - 0.5)));
      }
      break;
    }
  }
  return m;
}

std::vector<SynthScene> synthesize_scenes(const SynthConfig& config, std::uint64_t seed) {
  if (config.image_size < 32) throw std::invalid_argument("synthetic images need side >= 32");
  if (config.emotions_per_image < 1 || config.emotions_per_image > 3) {
    throw std::invalid_argument("emotions_per_image must be 1..3");
  }
  Rng rng(seed);
  std::vector<SynthScene> scenes;
  const std::array<std::pair<const char*, int>, 3> splits = {
      {{"train", config.per_emotion},
       {"val", config.val_per_emotion},
       {"test", config.test_per_emotion}}};
  for (const auto& [split, count] : splits) {
    if (count <= 0) continue;
    for (const auto& group : pack_emotions(count, config.emotions_per_image, rng)) {
      SynthScene scene = make_scene(group, config.image_size, config.max_distractors, rng);
      scene.split = split;
      scenes.push_back(std::move(scene));
    }
  }
  return scenes;
}

Manifest synthesize(const SynthConfig& config, std::uint64_t seed,
                    const std::filesystem::path& root) {
  const auto scenes = synthesize_scenes(config, seed);
  std::filesystem::create_directories(root / "images");
  std::filesystem::create_directories(root / "masks");
  Manifest manifest;
  manifest.root = root;
  std::map<std::string, int> per_split;
  for (const auto& scene : scenes) {
    char stem[64];
    std::snprintf(stem, sizeof stem, "%s_%04d", scene.split.c_str(), per_split[scene.split]++);
    const std::string image_rel = std::string("images/") + stem + ".png";
    write_png_rgb(root / image_rel, scene.image);
    for (const auto& shape : scene.shapes) {
      if (!shape.emotion) continue;
      const std::string mask_rel =
          std::string("masks/") + stem + "_" + std::string(shape.emotion->name()) + ".png";
      write_png_mask(root / mask_rel, rasterize(shape, config.image_size, config.image_size));
      manifest.records.push_back({image_rel, mask_rel, std::string(shape.emotion->name()),
                                  explanation_for(*shape.emotion, shape.kind), scene.split});
    }
  }
  write_manifest(manifest, root / "manifest.jsonl");
  return manifest;
}

}  // namespace stimseg

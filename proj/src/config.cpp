#include "stimseg/config.hpp"

#include <fstream>
#include <sstream>

namespace stimseg {

std::string to_string(Paradigm p) { return p == Paradigm::MultiMasks ? "multi" : "single"; }

Paradigm paradigm_from_string(const std::string& s) {
  if (s == "single") return Paradigm::SingleMask;
  if (s == "multi") return Paradigm::MultiMasks;
  throw ConfigError("unknown mode '" + s + "' (expected single or multi)");
}

namespace {

void check(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

}  // namespace

void ModelConfig::validate() const {
  check(preset == "toy" || preset == "paper", "unknown preset '" + preset + "'");
  check(image_size > 0 && seg_grid > 0 && lang_grid > 0, "grid sizes must be positive");
  check(image_size % seg_grid == 0,
        "image size " + std::to_string(image_size) + " not divisible by segmentation grid " +
            std::to_string(seg_grid));
  check(image_size % lang_grid == 0,
        "image size " + std::to_string(image_size) + " not divisible by language grid " +
            std::to_string(lang_grid));
  check(seg_heads > 0 && d_k % seg_heads == 0, "d_k must be divisible by seg_heads");
  check(heads > 0 && d_w % heads == 0, "d_w must be divisible by heads");
  check(d_h % heads == 0, "d_h must be divisible by heads");
  check(d_h == d_w, "prefix width d_h must equal the word embedding width d_w");
  check(d_k % 8 == 0, "d_k must be divisible by 8 for the mask head channel schedule");
  check(mixer_blocks >= 1 && decoder_blocks >= 1 && encoder_depth >= 0, "bad depth");
  check(prompt_len >= 1 && max_len >= 3, "bad sequence lengths");
  check(nucleus_p > 0.0 && nucleus_p <= 1.0, "nucleus_p must lie in (0, 1]");
  check(focal_gamma >= 0.0 && focal_alpha >= 0.0 && focal_alpha <= 1.0, "bad focal parameters");
  check(dice_eps > 0.0, "dice_eps must be positive");
  check(image_size % saliency_size() == 0,
        "image size must be a multiple of the saliency resolution 4*G");
}

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.preset = "paper";
  c.image_size = 1024;
  c.d_k = 256;
  c.d_w = 768;
  c.d_h = 768;
  c.seg_grid = 64;
  c.lang_grid = 16;
  c.encoder_depth = 2;
  c.mixer_blocks = 2;
  c.decoder_blocks = 6;
  c.heads = 12;
  c.seg_heads = 8;
  c.max_len = 25;
  c.prompt_len = 8;
  c.nucleus_p = 0.9;
  c.freeze = FreezeFlags{true, true, false};
  return c;
}

ModelConfig ModelConfig::from_preset(const std::string& name) {
  if (name == "toy") return toy();
  if (name == "paper") return paper();
  throw ConfigError("unknown preset '" + name + "' (expected paper or toy)");
}

nlohmann::json ModelConfig::to_json() const {
  return {
      {"preset", preset},
      {"mode", to_string(paradigm)},
      {"image_size", image_size},
      {"d_k", d_k},
      {"d_w", d_w},
      {"d_h", d_h},
      {"seg_grid", seg_grid},
      {"lang_grid", lang_grid},
      {"encoder_depth", encoder_depth},
      {"mixer_blocks", mixer_blocks},
      {"decoder_blocks", decoder_blocks},
      {"heads", heads},
      {"seg_heads", seg_heads},
      {"mlp_ratio", mlp_ratio},
      {"max_len", max_len},
      {"prompt_len", prompt_len},
      {"nucleus_p", nucleus_p},
      {"mask_threshold", mask_threshold},
      {"focal_alpha", focal_alpha},
      {"focal_gamma", focal_gamma},
      {"dice_eps", dice_eps},
      {"freeze_encoder", freeze.encoder},
      {"freeze_mixer", freeze.mixer},
      {"freeze_mask_head", freeze.mask_head},
      {"init_seed", init_seed},
  };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c = from_preset(j.at("preset").get<std::string>());
  c.paradigm = paradigm_from_string(j.at("mode").get<std::string>());
  c.image_size = j.at("image_size");
  c.d_k = j.at("d_k");
  c.d_w = j.at("d_w");
  c.d_h = j.at("d_h");
  c.seg_grid = j.at("seg_grid");
  c.lang_grid = j.at("lang_grid");
  c.encoder_depth = j.at("encoder_depth");
  c.mixer_blocks = j.at("mixer_blocks");
  c.decoder_blocks = j.at("decoder_blocks");
  c.heads = j.at("heads");
  c.seg_heads = j.at("seg_heads");
  c.mlp_ratio = j.at("mlp_ratio");
  c.max_len = j.at("max_len");
  c.prompt_len = j.at("prompt_len");
  c.nucleus_p = j.at("nucleus_p");
  c.mask_threshold = j.at("mask_threshold");
  c.focal_alpha = j.at("focal_alpha");
  c.focal_gamma = j.at("focal_gamma");
  c.dice_eps = j.at("dice_eps");
  c.freeze.encoder = j.at("freeze_encoder");
  c.freeze.mixer = j.at("freeze_mixer");
  c.freeze.mask_head = j.at("freeze_mask_head");
  c.init_seed = j.at("init_seed");
  c.validate();
  return c;
}

TrainConfig TrainConfig::paper(Paradigm p) {
  TrainConfig t;
  t.lr_lang = 2e-4;
  t.lr_seg = p == Paradigm::MultiMasks ? 8e-5 : 1e-4;
  t.per_step_batch = 4;
  t.accumulation = 4;
  t.epochs = 10;
  return t;
}

TrainConfig TrainConfig::toy(Paradigm p) {
  TrainConfig t;
  t.lr_lang = 3e-3;
  t.lr_seg = 3e-3;
  t.per_step_batch = 4;
  t.accumulation = 4;
  t.epochs = p == Paradigm::MultiMasks ? 500 : 250;
  t.max_updates = 500;
  return t;
}

TrainConfig TrainConfig::for_preset(const std::string& preset, Paradigm p) {
  if (preset == "paper") return paper(p);
  if (preset == "toy") return toy(p);
  throw ConfigError("unknown preset '" + preset + "'");
}

nlohmann::json TrainConfig::to_json() const {
  return {
      {"lr_lang", lr_lang},         {"lr_seg", lr_seg},
      {"beta1", beta1},             {"beta2", beta2},
      {"adam_eps", adam_eps},       {"weight_decay", weight_decay},
      {"per_step_batch", per_step_batch},
      {"accumulation", accumulation},
      {"epochs", epochs},           {"max_updates", max_updates},
      {"seed", seed},               {"eval_seed", eval_seed},
  };
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig t;
  t.lr_lang = j.at("lr_lang");
  t.lr_seg = j.at("lr_seg");
  t.beta1 = j.at("beta1");
  t.beta2 = j.at("beta2");
  t.adam_eps = j.at("adam_eps");
  t.weight_decay = j.at("weight_decay");
  t.per_step_batch = j.at("per_step_batch");
  t.accumulation = j.at("accumulation");
  t.epochs = j.at("epochs");
  t.max_updates = j.at("max_updates");
  t.seed = j.at("seed");
  t.eval_seed = j.at("eval_seed");
  return t;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int out = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

}  // namespace

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

std::map<std::string, std::string> read_key_value_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

void apply_overrides(const std::map<std::string, std::string>& kv, ModelConfig& m,
                     TrainConfig& t) {
  for (const auto& [key, v] : kv) {
    if (key == "preset" || key == "mode") continue;  // consumed by the caller
    else if (key == "image_size") m.image_size = to_int(key, v);
    else if (key == "d_k") m.d_k = to_int(key, v);
    else if (key == "d_w") m.d_w = to_int(key, v);
    else if (key == "d_h") m.d_h = to_int(key, v);
    else if (key == "seg_grid") m.seg_grid = to_int(key, v);
    else if (key == "lang_grid") m.lang_grid = to_int(key, v);
    else if (key == "encoder_depth") m.encoder_depth = to_int(key, v);
    else if (key == "mixer_blocks") m.mixer_blocks = to_int(key, v);
    else if (key == "decoder_blocks") m.decoder_blocks = to_int(key, v);
    else if (key == "heads") m.heads = to_int(key, v);
    else if (key == "seg_heads") m.seg_heads = to_int(key, v);
    else if (key == "mlp_ratio") m.mlp_ratio = to_int(key, v);
    else if (key == "max_len") m.max_len = to_int(key, v);
    else if (key == "prompt_len") m.prompt_len = to_int(key, v);
    else if (key == "nucleus_p") m.nucleus_p = to_double(key, v);
    else if (key == "mask_threshold") m.mask_threshold = to_double(key, v);
    else if (key == "focal_alpha") m.focal_alpha = to_double(key, v);
    else if (key == "focal_gamma") m.focal_gamma = to_double(key, v);
    else if (key == "dice_eps") m.dice_eps = to_double(key, v);
    else if (key == "freeze_encoder") m.freeze.encoder = to_bool(key, v);
    else if (key == "freeze_mixer") m.freeze.mixer = to_bool(key, v);
    else if (key == "freeze_mask_head") m.freeze.mask_head = to_bool(key, v);
    else if (key == "init_seed") m.init_seed = static_cast<std::uint64_t>(to_int(key, v));
    else if (key == "lr_lang") t.lr_lang = to_double(key, v);
    else if (key == "lr_seg") t.lr_seg = to_double(key, v);
    else if (key == "beta1") t.beta1 = to_double(key, v);
    else if (key == "beta2") t.beta2 = to_double(key, v);
    else if (key == "weight_decay") t.weight_decay = to_double(key, v);
    else if (key == "per_step_batch") t.per_step_batch = to_int(key, v);
    else if (key == "accumulation") t.accumulation = to_int(key, v);
    else if (key == "epochs") t.epochs = to_int(key, v);
    else if (key == "max_updates") t.max_updates = to_int(key, v);
    else if (key == "seed") t.seed = static_cast<std::uint64_t>(to_int(key, v));
    else if (key == "eval_seed") t.eval_seed = static_cast<std::uint64_t>(to_int(key, v));
    else throw ConfigError("unknown config key '" + key + "'");
  }
  if (t.per_step_batch < 1 || t.accumulation < 1) {
    throw ConfigError("per_step_batch and accumulation must be >= 1");
  }
}

}  // namespace stimseg

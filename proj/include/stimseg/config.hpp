#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

namespace stimseg {

// Raised for inconsistent dimensions, bad presets, malformed config files.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Paradigm { SingleMask, MultiMasks };

std::string to_string(Paradigm p);
Paradigm paradigm_from_string(const std::string& s);

struct FreezeFlags {
  bool encoder = false;
  bool mixer = false;
  bool mask_head = false;

  bool operator==(const FreezeFlags&) const = default;
};

struct ModelConfig {
  std::string preset = "toy";
  Paradigm paradigm = Paradigm::SingleMask;

  int image_size = 64;
  int d_k = 32;          // segmentation stream width
  int d_w = 64;          // word embedding / language stream width
  int d_h = 64;          // prefix width, must equal d_w
  int seg_grid = 16;     // G
  int lang_grid = 8;     // G_l
  int encoder_depth = 1;
  int mixer_blocks = 2;  // N
  int decoder_blocks = 2;  // M
  int heads = 4;         // language decoder and language-stream encoder
  int seg_heads = 4;     // segmentation encoder and feature mixer
  int mlp_ratio = 4;
  int max_len = 25;
  int prompt_len = 8;    // l_e
  double nucleus_p = 0.9;
  double mask_threshold = 0.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double dice_eps = 1.0;
  FreezeFlags freeze;
  std::uint64_t init_seed = 0;

  int seg_patch() const { return image_size / seg_grid; }
  int lang_patch() const { return image_size / lang_grid; }
  int saliency_size() const { return 4 * seg_grid; }
  int mask_tokens() const { return paradigm == Paradigm::MultiMasks ? 8 : 1; }
  // l_f
  int prefix_len() const { return paradigm == Paradigm::MultiMasks ? 1 : prompt_len + 1; }

  // Throws ConfigError on any violated invariant.
  void validate() const;

  static ModelConfig toy();
  static ModelConfig paper();
  static ModelConfig from_preset(const std::string& name);

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct TrainConfig {
  double lr_lang = 2e-4;
  double lr_seg = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  int per_step_batch = 4;
  int accumulation = 4;
  int epochs = 10;
  int max_updates = 0;  // 0 = no cap
  std::uint64_t seed = 0;
  std::uint64_t eval_seed = 1234;

  int effective_batch() const { return per_step_batch * accumulation; }

  // Paper learning rates; the seg group rate depends on the paradigm.
  static TrainConfig paper(Paradigm p);
  // Settings for the from-scratch desk-scale overfit runs.
  static TrainConfig toy(Paradigm p);
  static TrainConfig for_preset(const std::string& preset, Paradigm p);

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// `key = value` lines; '#' starts a comment. Keys are kept verbatim.
std::map<std::string, std::string> parse_key_values(const std::string& text);
std::map<std::string, std::string> read_key_value_file(const std::filesystem::path& path);

// Applies recognised keys and throws ConfigError on unknown ones.
void apply_overrides(const std::map<std::string, std::string>& kv, ModelConfig& model,
                     TrainConfig& train);

}  // namespace stimseg

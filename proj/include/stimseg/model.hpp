#pragma once

#include "stimseg/config.hpp"
#include "stimseg/dataset.hpp"
#include "stimseg/emotion_projector.hpp"
#include "stimseg/encoders.hpp"
#include "stimseg/lang_decoder.hpp"
#include "stimseg/losses.hpp"
#include "stimseg/prefix_adapter.hpp"
#include "stimseg/seg_decoder.hpp"

#include <optional>
#include <span>
#include <vector>

namespace stimseg {

struct SegmentOutput {
  MixerOutput mixer;
  Tensor saliency;  // n x R^2 logits, n = 1 (Single-Mask) or 8 (Multi-Masks)
  std::vector<EmotionId> emotions;                    // emotion of each saliency row
  std::vector<std::vector<double>> saliency_resized;  // H x W per row
  std::vector<BinaryMask> masks;                      // thresholded, H x W per row
};

struct Explanation {
  EmotionId emotion;
  GenerationResult generation;
  std::string text;
};

class StimulusModel {
 public:
  StimulusModel(ModelConfig config, Vocabulary vocab);

  StimulusModel(const StimulusModel&) = delete;
  StimulusModel& operator=(const StimulusModel&) = delete;

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  // Frozen groups get requires_grad = false.
  void apply_freeze(const FreezeFlags& flags);

  Tensor encode_seg(const Image& image) const { return seg_encoder.encode(image); }
  Tensor encode_lang(const Image& image) const { return lang_encoder.encode(image); }
  Tensor embed_text(std::span<const std::int64_t> ids) const { return embedding.embed(ids); }
  TokenIds prompt_ids(EmotionId emotion) const;
  Tensor project(EmotionId emotion) const;

  // Runs the mixer for one image. Single-Mask needs `emotion`; Multi-Masks
  // must not receive one.
  MixerOutput run_mixer(const Tensor& vision, std::optional<EmotionId> emotion) const;

  // Full segmentation pass; the saliency tensor keeps its graph when grad
  // mode is on.
  SegmentOutput segment(const Image& image, std::optional<EmotionId> emotion) const;

  // Prefix for the mask-token row `row` of a mixer output.
  Tensor prefix_for(const MixerOutput& mixed, Index row) const;

  Explanation explain(const Tensor& vision_lang, const Tensor& prefix, EmotionId emotion,
                      double nucleus_p, std::uint64_t seed) const;

  // Single-Mask objective for one annotated sample.
  LossReport single_mask_loss(const Sample& sample) const;
  // Multi-Masks objective for all annotated records of one image.
  LossReport multi_mask_loss(std::span<const Sample* const> annotations) const;
  // The same objective from an already computed mixer output, so callers can
  // substitute leaves for the updated tokens.
  LossReport multi_mask_loss_from(const MixerOutput& mixed, const Tensor& vision_lang,
                                  std::span<const Sample* const> annotations) const;

  VisionEncoder seg_encoder;
  VisionEncoder lang_encoder;
  TokenEmbedding embedding;
  EmotionProjector projector;
  Tensor mask_tokens;  // n_m x d_k
  FeatureMixer mixer;
  MaskHead mask_head;
  PrefixAdapter adapter;
  LanguageDecoder decoder;

 private:
  ModelConfig config_;
  Vocabulary vocab_;
  ParameterSet params_;
};

// Vocabulary for a corpus: the explanations plus the prompt template words.
Vocabulary model_vocabulary(std::span<const std::string> explanations);

}  // namespace stimseg

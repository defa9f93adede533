#include "stimseg/model.hpp"

#include <stdexcept>

namespace stimseg {

Vocabulary model_vocabulary(std::span<const std::string> explanations) {
  const auto extra = prompt_vocabulary();
  return build_vocabulary(explanations, extra);
}

StimulusModel::StimulusModel(ModelConfig config, Vocabulary vocab)
    : config_(std::move(config)), vocab_(std::move(vocab)) {
  config_.validate();
  const auto& c = config_;
  Rng rng(mix_seed(c.init_seed, 0xE5E5));
  seg_encoder = VisionEncoder(params_, "seg_encoder", c.image_size, c.seg_grid, c.d_k,
                              c.encoder_depth, c.seg_heads, c.mlp_ratio, rng);
  lang_encoder = VisionEncoder(params_, "lang_encoder", c.image_size, c.lang_grid, c.d_w,
                               c.encoder_depth, c.heads, c.mlp_ratio, rng);
  embedding = TokenEmbedding(params_, "embedding", vocab_.size(), c.d_w, rng);
  projector = EmotionProjector(params_, "projector", c.d_w, c.d_k, rng);
  mask_tokens = params_.add("mask_tokens", random_normal(c.mask_tokens(), c.d_k, 1.0, rng),
                            ParamGroup::MaskHead);
  mixer = FeatureMixer(params_, "mixer", c.d_k, c.seg_heads, c.mixer_blocks, c.mlp_ratio, rng);
  mask_head = MaskHead(params_, "mask_head", c.d_k, c.seg_grid, rng);
  adapter = PrefixAdapter(params_, "adapter", c.d_k, c.d_h, rng);
  decoder = LanguageDecoder(params_, "decoder", c.d_w, c.heads, c.decoder_blocks, c.mlp_ratio,
                            c.prefix_len() + c.max_len, rng);
  apply_freeze(c.freeze);
}

void StimulusModel::apply_freeze(const FreezeFlags& flags) {
  config_.freeze = flags;
  for (auto& p : params_.items()) {
    bool frozen = false;
    switch (p.group) {
      case ParamGroup::Encoder: frozen = flags.encoder; break;
      case ParamGroup::Mixer: frozen = flags.mixer; break;
      case ParamGroup::MaskHead: frozen = flags.mask_head; break;
      default: break;
    }
    p.tensor.set_requires_grad(!frozen);
  }
}

TokenIds StimulusModel::prompt_ids(EmotionId emotion) const {
  return encode_prompt(emotion, vocab_, config_.prompt_len);
}

Tensor StimulusModel::project(EmotionId emotion) const {
  const auto ids = prompt_ids(emotion);
  return projector.project(embedding, ids);
}

MixerOutput StimulusModel::run_mixer(const Tensor& vision, std::optional<EmotionId> emotion) const {
  if (config_.paradigm == Paradigm::MultiMasks) {
    if (emotion) throw std::invalid_argument("Multi-Masks mode takes no emotion prompt");
    return mixer.run(Paradigm::MultiMasks, std::nullopt, mask_tokens, vision);
  }
  if (!emotion) throw std::invalid_argument("Single-Mask mode needs an emotion");
  return mixer.run(Paradigm::SingleMask, project(*emotion), mask_tokens, vision);
}

SegmentOutput StimulusModel::segment(const Image& image, std::optional<EmotionId> emotion) const {
  SegmentOutput out;
  out.mixer = run_mixer(encode_seg(image), emotion);
  out.saliency = mask_head.saliency(out.mixer.mask_tokens, out.mixer.vision);
  if (config_.paradigm == Paradigm::MultiMasks) {
    for (int e = 0; e < kNumEmotions; ++e) out.emotions.emplace_back(e);
  } else {
    out.emotions.push_back(*emotion);
  }
  const int r = mask_head.resolution();
  for (Index row = 0; row < out.saliency.rows(); ++row) {
    auto resized = resize_saliency(out.saliency.value().row(row), r, image.height, image.width);
    out.masks.push_back(threshold_mask(resized, image.height, image.width, config_.mask_threshold));
    out.saliency_resized.push_back(std::move(resized));
  }
  return out;
}

Tensor StimulusModel::prefix_for(const MixerOutput& mixed, Index row) const {
  const Tensor m = ops::slice_rows(mixed.mask_tokens, row, 1);
  if (config_.paradigm == Paradigm::MultiMasks) return adapter.adapt(std::nullopt, m);
  return adapter.adapt(mixed.prompt, m);
}

Explanation StimulusModel::explain(const Tensor& vision_lang, const Tensor& prefix,
                                 EmotionId emotion, double nucleus_p, std::uint64_t seed) const {
  Explanation e;
  e.emotion = emotion;
  e.generation = decoder.generate(embedding, vision_lang, prefix, nucleus_p, seed, config_.max_len);
  e.text = vocab_.decode(e.generation.tokens);
  return e;
}

LossReport StimulusModel::single_mask_loss(const Sample& sample) const {
  if (config_.paradigm != Paradigm::SingleMask) {
    throw std::logic_error("single_mask_loss on a Multi-Masks model");
  }
  const int r = mask_head.resolution();
  const MixerOutput mixed = run_mixer(encode_seg(sample.image), sample.emotion);
  const Tensor logits =
      ops::reshape(mask_head.saliency(mixed.mask_tokens, mixed.vision), r, r);
  const Matrix target = downsample_mask(sample.mask, r);
  const Tensor dice = dice_loss(logits, target, config_.dice_eps);
  const Tensor focal =
      focal_loss(logits, target, FocalParams::standard(config_.focal_alpha, config_.focal_gamma));
  const Tensor prefix = adapter.adapt(mixed.prompt, mixed.mask_tokens);
  const Tensor word_logits =
      decoder.decode_train(embedding, encode_lang(sample.image), prefix, sample.tokens);
  const Tensor lang = lang_loss(word_logits, sample.tokens);

  LossReport rep;
  rep.dice = dice.item();
  rep.focal = focal.item();
  rep.lang = lang.item();
  rep.total = rep.dice + rep.focal + rep.lang;
  rep.total_tensor = ops::add(ops::add(dice, focal), lang);
  return rep;
}

LossReport StimulusModel::multi_mask_loss(std::span<const Sample* const> annotations) const {
  if (config_.paradigm != Paradigm::MultiMasks) {
    throw std::logic_error("multi_mask_loss on a Single-Mask model");
  }
  if (annotations.empty()) throw std::invalid_argument("multi_mask_loss: no annotated emotions");
  const Image& image = annotations.front()->image;
  for (const Sample* s : annotations) {
    if (s->image_path != annotations.front()->image_path) {
      throw std::invalid_argument("multi_mask_loss: annotations span several images");
    }
  }
  return multi_mask_loss_from(run_mixer(encode_seg(image), std::nullopt), encode_lang(image),
                              annotations);
}

LossReport StimulusModel::multi_mask_loss_from(const MixerOutput& mixed, const Tensor& vision_lang,
                                             std::span<const Sample* const> annotations) const {
  if (annotations.empty()) throw std::invalid_argument("multi_mask_loss: no annotated emotions");
  const int r = mask_head.resolution();
  const Tensor saliency = mask_head.saliency(mixed.mask_tokens, mixed.vision);
  const FocalParams fp = FocalParams::standard(config_.focal_alpha, config_.focal_gamma);

  LossReport rep;
  std::vector<Tensor> mask_terms;
  std::vector<Tensor> lang_terms;
  for (const Sample* s : annotations) {
    const Index row = s->emotion.value;
    if (rep.per_emotion.count(row)) {
      throw std::invalid_argument("multi_mask_loss: emotion annotated twice for one image");
    }
    const Tensor logits = ops::reshape(ops::slice_rows(saliency, row, 1), r, r);
    const Matrix target = downsample_mask(s->mask, r);
    const Tensor dice = dice_loss(logits, target, config_.dice_eps);
    const Tensor focal = focal_loss(logits, target, fp);
    const Tensor prefix = prefix_for(mixed, row);
    const Tensor lang = lang_loss(decoder.decode_train(embedding, vision_lang, prefix, s->tokens),
                                  s->tokens);
    rep.dice += dice.item();
    rep.focal += focal.item();
    rep.lang += lang.item();
    rep.per_emotion[static_cast<int>(row)] = {dice.item() + focal.item(), lang.item()};
    mask_terms.push_back(ops::add(dice, focal));
    lang_terms.push_back(lang);
  }
  Tensor mask_sum = mask_terms[0];
  for (std::size_t i = 1; i < mask_terms.size(); ++i) mask_sum = ops::add(mask_sum, mask_terms[i]);
  Tensor lang_sum = lang_terms[0];
  for (std::size_t i = 1; i < lang_terms.size(); ++i) lang_sum = ops::add(lang_sum, lang_terms[i]);
  rep.total_tensor = ops::add(mask_sum, lang_sum);
  rep.total = rep.total_tensor.item();
  return rep;
}

}  // namespace stimseg

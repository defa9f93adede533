#include "stimseg/emotion_projector.hpp"

namespace stimseg {

std::vector<std::string> prompt_vocabulary() { return tokenize(kPromptTemplate); }

TokenIds encode_prompt(EmotionId emotion, const Vocabulary& vocab, int length) {
  const auto words = tokenize(kPromptTemplate);
  TokenIds ids;
  const std::size_t room = static_cast<std::size_t>(std::max(0, length - 1));
  for (std::size_t i = 0; i < words.size() && i < room; ++i) ids.push_back(vocab.id(words[i]));
  while (ids.size() < room) ids.push_back(Vocabulary::kPad);
  ids.push_back(vocab.id(emotion.name()));
  return ids;
}

EmotionProjector::EmotionProjector(ParameterSet& params, const std::string& name, int d_w,
                                   int d_k, Rng& rng) {
  linear = Linear(params, name + ".linear", d_w, d_k, ParamGroup::Projector, rng);
}

Tensor EmotionProjector::project(const TokenEmbedding& embedding,
                                 std::span<const std::int64_t> prompt_ids) const {
  Tensor p = linear.forward(embedding.embed(prompt_ids));
  assert_finite(p, "prompt tokens");
  return p;
}

}  // namespace stimseg

#pragma once

#include "stimseg/dataset.hpp"
#include "stimseg/encoders.hpp"

namespace stimseg {

inline constexpr std::string_view kPromptTemplate = "generate the mask for the emotion";

// Words the vocabulary must contain so prompts never hit <unk>.
std::vector<std::string> prompt_vocabulary();

// Template words (truncated to length - 1), <pad> filler, then the emotion
// word in the final slot. Always exactly `length` ids.
TokenIds encode_prompt(EmotionId emotion, const Vocabulary& vocab, int length);

// Word embedding (shared table) followed by one affine map d_w -> d_k.
class EmotionProjector {
 public:
  EmotionProjector() = default;
  EmotionProjector(ParameterSet& params, const std::string& name, int d_w, int d_k, Rng& rng);

  Tensor project(const TokenEmbedding& embedding, std::span<const std::int64_t> prompt_ids) const;

  Linear linear;
};

}  // namespace stimseg

#pragma once

#include "stimseg/model.hpp"
#include "stimseg/optimizer.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>

namespace stimseg {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Optimisation progress needed to resume a run exactly.
struct TrainState {
  TrainConfig train;
  int epochs_done = 0;
  std::int64_t updates = 0;
  std::int64_t adam_steps = 0;
  std::map<std::string, AdamMoments> moments;
};

struct Checkpoint {
  std::unique_ptr<StimulusModel> model;
  std::optional<TrainState> state;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Binary layout: "STIMSGCK", u32 version, u64 header size, JSON header
// (configs, vocabulary, array directory), then raw float64 arrays in
// directory order.
void save_checkpoint(const std::filesystem::path& path, const StimulusModel& model,
                     const TrainState* state = nullptr);

// Rebuilds the model from the stored config and checks every array against
// the freshly built shapes.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace stimseg

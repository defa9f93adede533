#pragma once

#include "stimseg/checkpoint.hpp"
#include "stimseg/metrics.hpp"
#include "stimseg/model.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

namespace stimseg {

struct StepLog {
  std::int64_t step = 0;
  double dice = 0.0;
  double focal = 0.0;
  double lang = 0.0;
  double total = 0.0;
  double lr_seg = 0.0;
  double lr_lang = 0.0;

  nlohmann::ordered_json to_json() const;
};

// Units of work for one optimisation pass: single samples in Single-Mask
// mode, whole images (all their annotations) in Multi-Masks mode.
std::vector<std::vector<std::size_t>> training_units(Paradigm paradigm,
                                                     std::span<const Sample> samples);

struct TrainOptions {
  std::filesystem::path out_dir;                 // checkpoints, step log, run record
  std::optional<std::filesystem::path> resume;   // checkpoint to continue from
  bool checkpoint_each_epoch = true;
  int stop_after_epochs = 0;                     // > 0 ends early (used to test resume)
  std::function<void(const StepLog&)> on_step;
};

struct TrainResult {
  std::unique_ptr<StimulusModel> model;
  std::vector<StepLog> steps;
  int epochs_done = 0;
  std::int64_t updates = 0;
};

// Runs AdamW with gradient accumulation. Each unit's loss is divided by the
// effective batch so accumulated micro-batches equal one large batch.
// Non-finite losses write `nan_dump.json` under out_dir and throw
// NumericalError.
TrainResult train(const ModelConfig& model_config, const TrainConfig& train_config,
                  std::span<const Sample> samples, const Vocabulary& vocab,
                  const TrainOptions& options);

// One accumulation-free update over `units`; returns the summed report.
// Exposed for the accumulation-equivalence and freeze tests.
LossReport accumulate_gradients(StimulusModel& model, std::span<const Sample> samples,
                                std::span<const std::vector<std::size_t>> units, double scale);

struct Prediction {
  std::string image_path;
  EmotionId emotion;
  BinaryMask mask;
  std::string explanation;
  std::vector<double> token_logprobs;
};

struct EvalOptions {
  std::uint64_t eval_seed = 1234;
  bool zero_prefix = false;  // replace the prefix with zeros before decoding
};

struct EvalOutput {
  EvalReport report;
  std::vector<Prediction> predictions;
};

// Segments and explains every sample; the generation seed of sample i is
// mix_seed(eval_seed, i).
EvalOutput evaluate(const StimulusModel& model, std::span<const Sample> samples,
                    const EvalOptions& options);

// Scores externally produced predictions against gold samples. Predictions
// are matched on (image_path, emotion).
EvalReport score_predictions(std::span<const Prediction> predictions,
                             std::span<const Sample> gold);

// Reads {mask_path, explanation, emotion[, image_path]} lines; mask paths are
// relative to the file's directory unless absolute.
std::vector<Prediction> read_predictions(const std::filesystem::path& path);

struct InferOutput {
  nlohmann::ordered_json result;
  std::vector<std::filesystem::path> files;
};

// Writes mask, 16-bit saliency and RGBA overlay PNGs per emotion plus one
// result JSON. Single-Mask requires `emotion`; Multi-Masks explains all eight.
InferOutput infer(const StimulusModel& model, const Image& image, std::optional<EmotionId> emotion,
                  const std::filesystem::path& out_dir, std::uint64_t seed,
                  const std::string& stem = "result");

// Content hash of the sources baked in at configure time.
const char* code_version();

nlohmann::ordered_json run_record(const ModelConfig& model_config, const TrainConfig& train_config,
                                  std::span<const StepLog> steps,
                                  const std::optional<EvalReport>& final_eval);

}  // namespace stimseg

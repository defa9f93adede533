#include "stimseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#ifndef STIMSEG_CODE_HASH
#define STIMSEG_CODE_HASH "unknown"
#endif

namespace stimseg {

namespace fs = std::filesystem;

nlohmann::ordered_json StepLog::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["dice"] = dice;
  j["focal"] = focal;
  j["lang"] = lang;
  j["total"] = total;
  j["lr"] = {{"seg", lr_seg}, {"lang", lr_lang}};
  return j;
}

const char* code_version() { return STIMSEG_CODE_HASH; }

std::vector<std::vector<std::size_t>> training_units(Paradigm paradigm,
                                                     std::span<const Sample> samples) {
  std::vector<std::vector<std::size_t>> units;
  if (paradigm == Paradigm::SingleMask) {
    for (std::size_t i = 0; i < samples.size(); ++i) units.push_back({i});
  } else {
    for (auto& g : group_by_image(samples)) units.push_back(std::move(g.sample_indices));
  }
  return units;
}

LossReport accumulate_gradients(StimulusModel& model, std::span<const Sample> samples,
                                std::span<const std::vector<std::size_t>> units, double scale) {
  LossReport sum;
  for (const auto& unit : units) {
    LossReport rep;
    if (model.config().paradigm == Paradigm::SingleMask) {
      rep = model.single_mask_loss(samples[unit.at(0)]);
    } else {
      std::vector<const Sample*> group;
      for (const auto i : unit) group.push_back(&samples[i]);
      rep = model.multi_mask_loss(group);
    }
    if (!std::isfinite(rep.total)) {
      throw NumericalError("non-finite loss (dice " + std::to_string(rep.dice) + ", focal " +
                           std::to_string(rep.focal) + ", lang " + std::to_string(rep.lang) + ")");
    }
    ops::scale(rep.total_tensor, scale).backward();
    sum.dice += rep.dice;
    sum.focal += rep.focal;
    sum.lang += rep.lang;
    sum.total += rep.total;
  }
  return sum;
}

namespace {

void dump_batch(const fs::path& out_dir, std::int64_t step, int epoch,
                std::span<const Sample> samples, std::span<const std::vector<std::size_t>> units,
                const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = message;
  j["update"] = step;
  j["epoch"] = epoch;
  nlohmann::ordered_json batch = nlohmann::ordered_json::array();
  for (const auto& unit : units) {
    for (const auto i : unit) {
      const Sample& s = samples[i];
      batch.push_back({{"index", i},
                       {"image_path", s.image_path},
                       {"emotion", std::string(s.emotion.name())},
                       {"explanation", s.explanation},
                       {"tokens", s.tokens}});
    }
  }
  j["batch"] = batch;
  fs::create_directories(out_dir);
  std::ofstream(out_dir / "nan_dump.json") << j.dump(2) << "\n";
}

}  // namespace

TrainResult train(const ModelConfig& model_config, const TrainConfig& train_config,
                  std::span<const Sample> samples, const Vocabulary& vocab,
                  const TrainOptions& options) {
  if (samples.empty()) throw std::invalid_argument("train: no samples");
  if (train_config.per_step_batch < 1 || train_config.accumulation < 1) {
    throw ConfigError("per_step_batch and accumulation must be positive");
  }
  TrainResult result;
  AdamW opt(train_config);
  int start_epoch = 0;
  if (options.resume) {
    Checkpoint ck = load_checkpoint(*options.resume);
    if (ck.model->config().to_json() != model_config.to_json()) {
      throw ConfigError("resume checkpoint was trained with a different model config");
    }
    if (!(ck.model->vocab() == vocab)) {
      throw ConfigError("resume checkpoint uses a different vocabulary");
    }
    if (!ck.state) throw CheckpointError("resume checkpoint has no optimiser state");
    result.model = std::move(ck.model);
    start_epoch = ck.state->epochs_done;
    result.updates = ck.state->updates;
    opt.set_steps(ck.state->adam_steps);
    opt.moments() = std::move(ck.state->moments);
  } else {
    result.model = std::make_unique<StimulusModel>(model_config, vocab);
  }
  StimulusModel& model = *result.model;

  const auto units = training_units(model_config.paradigm, samples);
  const std::size_t eff = static_cast<std::size_t>(train_config.effective_batch());
  const double scale = 1.0 / static_cast<double>(eff);

  std::ofstream step_log;
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    step_log.open(options.out_dir / "steps.jsonl",
                  options.resume ? std::ios::app : std::ios::trunc);
  }

  result.epochs_done = start_epoch;
  int epochs_run = 0;
  bool capped = false;
  for (int epoch = start_epoch; epoch < train_config.epochs && !capped; ++epoch) {
    std::vector<std::size_t> order(units.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(train_config.seed, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order.begin(), order.end());

    for (std::size_t begin = 0; begin < order.size(); begin += eff) {
      if (train_config.max_updates > 0 && result.updates >= train_config.max_updates) {
        capped = true;
        break;
      }
      const std::size_t end = std::min(order.size(), begin + eff);
      std::vector<std::vector<std::size_t>> batch;
      for (std::size_t k = begin; k < end; ++k) batch.push_back(units[order[k]]);
      model.params().zero_grad();
      LossReport sum;
      try {
        sum = accumulate_gradients(model, samples, batch, scale);
      } catch (const NumericalError& e) {
        if (!options.out_dir.empty()) {
          dump_batch(options.out_dir, result.updates + 1, epoch, samples, batch, e.what());
        }
        throw;
      }
      opt.step(model.params());
      model.params().zero_grad();
      ++result.updates;

      const double n = static_cast<double>(batch.size());
      StepLog log{result.updates, sum.dice / n, sum.focal / n, sum.lang / n, sum.total / n,
                  train_config.lr_seg, train_config.lr_lang};
      if (step_log.is_open()) step_log << log.to_json().dump() << "\n";
      if (options.on_step) options.on_step(log);
      result.steps.push_back(log);
    }
    if (capped) break;
    result.epochs_done = epoch + 1;
    ++epochs_run;
    if (options.checkpoint_each_epoch && !options.out_dir.empty()) {
      TrainState st{train_config, result.epochs_done, result.updates, opt.steps(), opt.moments()};
      save_checkpoint(options.out_dir / "checkpoint.bin", model, &st);
    }
    if (options.stop_after_epochs > 0 && epochs_run >= options.stop_after_epochs) break;
  }
  if (!options.out_dir.empty()) {
    TrainState st{train_config, result.epochs_done, result.updates, opt.steps(), opt.moments()};
    save_checkpoint(options.out_dir / "checkpoint.bin", model, &st);
  }
  return result;
}

EvalOutput evaluate(const StimulusModel& model, std::span<const Sample> samples,
                    const EvalOptions& options) {
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  std::vector<Prediction> preds(samples.size());

  auto explain = [&](const MixerOutput& mixed, Index row, const Tensor& vision_lang,
                     std::size_t index) {
    const Sample& s = samples[index];
    Tensor prefix = model.prefix_for(mixed, row);
    if (options.zero_prefix) prefix = Tensor::zeros(prefix.rows(), prefix.cols());
    const Explanation ex = model.explain(vision_lang, prefix, s.emotion, cfg.nucleus_p,
                                         mix_seed(options.eval_seed, index));
    Prediction& p = preds[index];
    p.image_path = s.image_path;
    p.emotion = s.emotion;
    p.explanation = ex.text;
    p.token_logprobs = ex.generation.logprobs;
  };

  if (cfg.paradigm == Paradigm::SingleMask) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const Sample& s = samples[i];
      const SegmentOutput seg = model.segment(s.image, s.emotion);
      explain(seg.mixer, 0, model.encode_lang(s.image), i);
      preds[i].mask = seg.masks.at(0);
    }
  } else {
    for (const auto& group : group_by_image(samples)) {
      const Image& image = samples[group.sample_indices.front()].image;
      const SegmentOutput seg = model.segment(image, std::nullopt);
      const Tensor vision_lang = model.encode_lang(image);
      for (const auto i : group.sample_indices) {
        const Index row = samples[i].emotion.value;
        explain(seg.mixer, row, vision_lang, i);
        preds[i].mask = seg.masks.at(static_cast<std::size_t>(row));
      }
    }
  }

  std::vector<EvalItem> items;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    items.push_back({samples[i].emotion, preds[i].mask, samples[i].mask, preds[i].explanation,
                     samples[i].explanation});
  }
  return {score(items), std::move(preds)};
}

EvalReport score_predictions(std::span<const Prediction> predictions,
                             std::span<const Sample> gold) {
  std::map<std::pair<std::string, int>, const Prediction*> index;
  for (const auto& p : predictions) {
    if (!index.emplace(std::make_pair(p.image_path, p.emotion.value), &p).second) {
      throw std::invalid_argument("duplicate prediction for " + p.image_path + " / " +
                                  std::string(p.emotion.name()));
    }
  }
  std::vector<EvalItem> items;
  for (const auto& s : gold) {
    const auto it = index.find({s.image_path, s.emotion.value});
    if (it == index.end()) {
      throw std::invalid_argument("no prediction for " + s.image_path + " / " +
                                  std::string(s.emotion.name()));
    }
    items.push_back({s.emotion, it->second->mask, s.mask, it->second->explanation, s.explanation});
  }
  return score(items);
}

std::vector<Prediction> read_predictions(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ImageIoError("cannot open predictions file " + path.string());
  std::vector<Prediction> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(n, std::string("bad JSON: ") + e.what());
    }
    for (const char* key : {"mask_path", "explanation", "emotion"}) {
      if (!j.contains(key) || !j[key].is_string()) {
        throw LoadError(n, std::string("missing string field '") + key + "'");
      }
    }
    const auto emotion = emotion_from_name(j["emotion"].get<std::string>());
    if (!emotion) throw LoadError(n, "unknown emotion '" + j["emotion"].get<std::string>() + "'");
    Prediction p;
    p.emotion = *emotion;
    p.explanation = j["explanation"].get<std::string>();
    p.image_path = j.value("image_path", std::string());
    fs::path mask = j["mask_path"].get<std::string>();
    if (mask.is_relative()) mask = path.parent_path() / mask;
    p.mask = read_png_mask(mask);
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

std::vector<std::uint16_t> scale_saliency(const std::vector<double>& s) {
  const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
  std::vector<std::uint16_t> out(s.size(), 0);
  if (*hi <= *lo) return out;
  const double span = *hi - *lo;
  for (std::size_t i = 0; i < s.size(); ++i) {
    out[i] = static_cast<std::uint16_t>(std::lround((s[i] - *lo) / span * 65535.0));
  }
  return out;
}

std::vector<std::uint8_t> overlay(const Image& image, const BinaryMask& mask) {
  std::vector<std::uint8_t> rgba(static_cast<std::size_t>(image.height) * image.width * 4);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const std::size_t o = (static_cast<std::size_t>(y) * image.width + x) * 4;
      const bool on = mask.at(y, x) != 0;
      const double tint[3] = {1.0, 0.0, 0.0};
      for (int c = 0; c < 3; ++c) {
        const double v = image.at(y, x, c);
        rgba[o + c] = to_byte(on ? 0.5 * v + 0.5 * tint[c] : v);
      }
      rgba[o + 3] = 255;
    }
  }
  return rgba;
}

}  // namespace

InferOutput infer(const StimulusModel& model, const Image& image, std::optional<EmotionId> emotion,
                  const fs::path& out_dir, std::uint64_t seed, const std::string& stem) {
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  const Image input = (image.height == cfg.image_size && image.width == cfg.image_size)
                          ? image
                          : resize(image, cfg.image_size, cfg.image_size);
  const SegmentOutput seg = model.segment(input, emotion);
  const Tensor vision_lang = model.encode_lang(input);
  fs::create_directories(out_dir);

  InferOutput out;
  nlohmann::ordered_json results = nlohmann::ordered_json::array();
  const int r = model.mask_head.resolution();
  for (std::size_t row = 0; row < seg.emotions.size(); ++row) {
    const EmotionId e = seg.emotions[row];
    const auto sal =
        resize_saliency(seg.saliency.value().row(static_cast<Index>(row)), r, image.height,
                        image.width);
    const BinaryMask mask = threshold_mask(sal, image.height, image.width, cfg.mask_threshold);
    const std::string base = stem + "_" + std::string(e.name());
    const fs::path mask_path = out_dir / (base + "_mask.png");
    const fs::path sal_path = out_dir / (base + "_saliency.png");
    const fs::path overlay_path = out_dir / (base + "_overlay.png");
    write_png_mask(mask_path, mask);
    write_png_gray16(sal_path, image.height, image.width, scale_saliency(sal));
    write_png_rgba(overlay_path, image.height, image.width, overlay(image, mask));
    out.files.insert(out.files.end(), {mask_path, sal_path, overlay_path});

    const std::uint64_t s =
        cfg.paradigm == Paradigm::MultiMasks ? mix_seed(seed, static_cast<std::uint64_t>(e.value))
                                             : seed;
    const Explanation ex =
        model.explain(vision_lang, model.prefix_for(seg.mixer, static_cast<Index>(row)), e,
                      cfg.nucleus_p, s);
    nlohmann::ordered_json j;
    j["emotion"] = std::string(e.name());
    j["explanation"] = ex.text;
    j["token_logprobs"] = ex.generation.logprobs;
    j["mask_path"] = mask_path.filename().string();
    results.push_back(j);
  }
  if (cfg.paradigm == Paradigm::SingleMask) {
    out.result = results.at(0);
  } else {
    out.result["mode"] = "multi";
    out.result["results"] = results;
  }
  const fs::path json_path = out_dir / (stem + ".json");
  std::ofstream(json_path) << out.result.dump(2) << "\n";
  out.files.push_back(json_path);
  return out;
}

nlohmann::ordered_json run_record(const ModelConfig& model_config, const TrainConfig& train_config,
                                  std::span<const StepLog> steps,
                                  const std::optional<EvalReport>& final_eval) {
  nlohmann::ordered_json j;
  j["config"] = {{"model", model_config.to_json()}, {"train", train_config.to_json()}};
  j["code_version"] = code_version();
  nlohmann::ordered_json stream = nlohmann::ordered_json::array();
  for (const auto& s : steps) stream.push_back(s.to_json());
  j["steps"] = stream;
  j["final_eval"] = final_eval ? final_eval->to_json() : nlohmann::ordered_json();
  return j;
}

}  // namespace stimseg

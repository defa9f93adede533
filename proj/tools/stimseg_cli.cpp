#include "stimseg/checks.hpp"
#include "stimseg/checkpoint.hpp"
#include "stimseg/trainer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace stimseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitIo = 1;
constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

// Missing inputs are I/O failures; malformed ones are validation failures.
const std::string& require_file(const std::string& path) {
  if (!path.empty() && !fs::is_regular_file(path)) {
    throw fs::filesystem_error("no such file", fs::path(path),
                               std::make_error_code(std::errc::no_such_file_or_directory));
  }
  return path;
}

struct CommonFlags {
  std::string config;
  std::string preset;
  std::string mode;
  std::optional<std::uint64_t> seed;
  std::string data_root;
  std::string out;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config, "key = value configuration file");
  app->add_option("--preset", f.preset, "model preset")->check(CLI::IsMember({"paper", "toy"}));
  app->add_option("--mode", f.mode, "paradigm")->check(CLI::IsMember({"single", "multi"}));
  app->add_option("--seed", f.seed, "training / synthesis / sampling seed");
  app->add_option("--data-root", f.data_root, "dataset directory holding manifest.jsonl");
  app->add_option("--out", f.out, "output directory");
}

struct Resolved {
  ModelConfig model;
  TrainConfig train;
};

Resolved resolve(const CommonFlags& f) {
  std::map<std::string, std::string> kv;
  if (!f.config.empty()) kv = read_key_value_file(require_file(f.config));
  std::string preset = f.preset;
  if (preset.empty()) preset = kv.count("preset") ? kv.at("preset") : "toy";
  std::string mode = f.mode;
  if (mode.empty()) mode = kv.count("mode") ? kv.at("mode") : "single";
  Resolved r{ModelConfig::from_preset(preset), {}};
  r.model.paradigm = paradigm_from_string(mode);
  r.train = TrainConfig::for_preset(preset, r.model.paradigm);
  apply_overrides(kv, r.model, r.train);
  if (f.seed) {
    r.train.seed = *f.seed;
    r.model.init_seed = *f.seed;
  }
  r.model.validate();
  return r;
}

fs::path manifest_path(const std::string& data_root) {
  if (data_root.empty()) throw ConfigError("--data-root is required");
  const fs::path p = fs::path(data_root) / "manifest.jsonl";
  require_file(p.string());
  return p;
}

std::vector<Sample> split_samples(const Manifest& manifest, const Vocabulary& vocab,
                                  const ModelConfig& cfg, const std::string& split) {
  Manifest subset{manifest.root, {}};
  for (const auto& r : manifest.records) {
    if (split == "all" || r.split == split) subset.records.push_back(r);
  }
  if (subset.records.empty()) throw ConfigError("no records in split '" + split + "'");
  return load_samples(subset, vocab, cfg.max_len, cfg.image_size);
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw ImageIoError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

int run_synth(const CommonFlags& f, const SynthConfig& sc) {
  if (f.data_root.empty() && f.out.empty()) throw ConfigError("synth needs --data-root or --out");
  const fs::path root = f.out.empty() ? fs::path(f.data_root) : fs::path(f.out);
  const Manifest m = synthesize(sc, f.seed.value_or(0), root);
  std::cout << "wrote " << m.records.size() << " records to " << (root / "manifest.jsonl") << "\n";
  return kExitOk;
}

int run_train(const CommonFlags& f, const std::string& split, const std::string& resume) {
  const Resolved r = resolve(f);
  if (f.out.empty()) throw ConfigError("train needs --out");
  const Manifest manifest = read_manifest(manifest_path(f.data_root));
  Manifest train_part{manifest.root, {}};
  for (const auto& rec : manifest.records)
    if (rec.split == split) train_part.records.push_back(rec);
  const auto explanations = train_part.explanations();
  const Vocabulary vocab = model_vocabulary(explanations);
  const auto samples = split_samples(manifest, vocab, r.model, split);

  TrainOptions opt;
  opt.out_dir = f.out;
  if (!resume.empty()) opt.resume = require_file(resume);
  const auto t0 = std::chrono::steady_clock::now();
  opt.on_step = [&](const StepLog& s) {
    if (s.step == 1 || s.step % 25 == 0) {
      const double sec =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cout << "update " << s.step << "  dice " << s.dice << "  focal " << s.focal
                << "  lang " << s.lang << "  total " << s.total << "  (" << sec << " s)\n";
    }
  };
  const TrainResult result = train(r.model, r.train, samples, vocab, opt);
  EvalOptions eo;
  eo.eval_seed = r.train.eval_seed;
  const EvalOutput ev = evaluate(*result.model, samples, eo);
  std::cout << ev.report.table();
  write_json(fs::path(f.out) / "run_record.json",
             run_record(r.model, r.train, result.steps, ev.report));
  std::cout << "checkpoint " << (fs::path(f.out) / "checkpoint.bin") << "\n";
  return kExitOk;
}

void check_matches(const CommonFlags& f, const ModelConfig& stored) {
  if (!f.preset.empty() && f.preset != stored.preset) {
    throw ConfigError("checkpoint preset '" + stored.preset + "' does not match --preset " +
                      f.preset);
  }
  if (!f.mode.empty() && paradigm_from_string(f.mode) != stored.paradigm) {
    throw ConfigError("checkpoint mode '" + to_string(stored.paradigm) + "' does not match --mode " +
                      f.mode);
  }
  if (!f.config.empty()) {
    const auto kv = read_key_value_file(f.config);
    if (kv.count("preset") && kv.at("preset") != stored.preset) {
      throw ConfigError("config preset does not match the checkpoint");
    }
    if (kv.count("mode") && paradigm_from_string(kv.at("mode")) != stored.paradigm) {
      throw ConfigError("config mode does not match the checkpoint");
    }
  }
}

int run_eval(const CommonFlags& f, const std::string& checkpoint, const std::string& split,
             const std::string& predictions, bool zero_prefix) {
  const Manifest manifest = read_manifest(manifest_path(f.data_root));
  EvalReport report;
  if (!predictions.empty()) {
    const Vocabulary vocab = model_vocabulary(manifest.explanations());
    ModelConfig cfg = ModelConfig::toy();
    Manifest subset{manifest.root, {}};
    for (const auto& r : manifest.records)
      if (split == "all" || r.split == split) subset.records.push_back(r);
    const auto gold = load_samples(subset, vocab, cfg.max_len);
    report = score_predictions(read_predictions(require_file(predictions)), gold);
  } else {
    if (checkpoint.empty()) throw ConfigError("eval needs --checkpoint or --predictions");
    const Checkpoint ck = load_checkpoint(require_file(checkpoint));
    check_matches(f, ck.model->config());
    const auto samples = split_samples(manifest, ck.model->vocab(), ck.model->config(), split);
    EvalOptions eo;
    if (ck.state) eo.eval_seed = ck.state->train.eval_seed;
    if (f.seed) eo.eval_seed = *f.seed;
    eo.zero_prefix = zero_prefix;
    const EvalOutput out = evaluate(*ck.model, samples, eo);
    report = out.report;
    if (!f.out.empty()) {
      const fs::path dir = fs::path(f.out) / "predictions";
      fs::create_directories(dir);
      std::ofstream os(fs::path(f.out) / "predictions.jsonl");
      for (std::size_t i = 0; i < out.predictions.size(); ++i) {
        const auto& p = out.predictions[i];
        const std::string name = "pred_" + std::to_string(i) + ".png";
        write_png_mask(dir / name, p.mask);
        nlohmann::ordered_json j;
        j["image_path"] = p.image_path;
        j["mask_path"] = "predictions/" + name;
        j["emotion"] = std::string(p.emotion.name());
        j["explanation"] = p.explanation;
        os << j.dump() << "\n";
      }
    }
  }
  std::cout << report.table();
  if (!f.out.empty()) {
    write_json(fs::path(f.out) / "eval_report.json", report.to_json());
    std::ofstream(fs::path(f.out) / "eval_report.txt") << report.table();
  }
  return kExitOk;
}

int run_infer(const CommonFlags& f, const std::string& checkpoint, const std::string& image_path,
              const std::string& emotion_name) {
  if (checkpoint.empty()) throw ConfigError("infer needs --checkpoint");
  if (image_path.empty()) throw ConfigError("infer needs --image");
  if (f.out.empty()) throw ConfigError("infer needs --out");
  const Checkpoint ck = load_checkpoint(require_file(checkpoint));
  check_matches(f, ck.model->config());
  std::optional<EmotionId> emotion;
  if (ck.model->config().paradigm == Paradigm::SingleMask) {
    if (emotion_name.empty() || emotion_name == "all") {
      throw ConfigError("Single-Mask inference needs --emotion <name>");
    }
    emotion = emotion_from_name(emotion_name);
    if (!emotion) throw ConfigError("unknown emotion '" + emotion_name + "'");
  } else if (!emotion_name.empty() && emotion_name != "all") {
    throw ConfigError("Multi-Masks inference always explains all emotions; use --emotion all");
  }
  const Image image = read_png_rgb(image_path);
  const InferOutput out = infer(*ck.model, image, emotion, f.out, f.seed.value_or(0),
                                fs::path(image_path).stem().string());
  std::cout << out.result.dump(2) << "\n";
  return kExitOk;
}

int run_selftest() {
  bool ok = true;
  for (const auto& suite : {checks::oracle_suite(), checks::gradient_suite(),
                            checks::identity_suite(), checks::metric_suite()}) {
    for (const auto& r : suite) {
      checks::print(std::cout, r);
      ok = ok && r.passed;
    }
  }
  std::cout << (ok ? "selftest passed\n" : "selftest FAILED\n");
  return ok ? kExitOk : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "stimseg: emotion-prompted stimulus segmentation with generated explanations.\n"
      "The paper preset freezes the vision encoders and the feature mixer by default; the toy\n"
      "preset trains every group from scratch."};
  app.require_subcommand(1);
  CommonFlags flags;

  auto* synth = app.add_subcommand("synth", "write a synthetic shapes corpus");
  SynthConfig sc;
  add_common(synth, flags);
  synth->add_option("--per-emotion", sc.per_emotion, "train records per emotion");
  synth->add_option("--val-per-emotion", sc.val_per_emotion, "validation records per emotion");
  synth->add_option("--test-per-emotion", sc.test_per_emotion, "test records per emotion");
  synth->add_option("--image-size", sc.image_size, "image side in pixels");

  auto* train_cmd = app.add_subcommand("train", "train a model on a manifest split");
  add_common(train_cmd, flags);
  std::string split = "train";
  std::string resume;
  train_cmd->add_option("--split", split, "manifest split to train on");
  train_cmd->add_option("--resume", resume, "checkpoint to continue from");

  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint or a predictions file");
  add_common(eval_cmd, flags);
  std::string checkpoint;
  std::string predictions;
  bool zero_prefix = false;
  std::string eval_split = "train";
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint.bin");
  eval_cmd->add_option("--predictions", predictions, "predictions JSONL to score instead");
  eval_cmd->add_option("--split", eval_split, "manifest split, or 'all'");
  eval_cmd->add_flag("--zero-prefix", zero_prefix, "replace the language prefix with zeros");

  auto* infer_cmd = app.add_subcommand("infer", "segment and explain one image");
  add_common(infer_cmd, flags);
  std::string image;
  std::string emotion;
  infer_cmd->add_option("--checkpoint", checkpoint, "checkpoint.bin");
  infer_cmd->add_option("--image", image, "input PNG");
  infer_cmd->add_option("--emotion", emotion, "emotion name, or 'all' in multi mode");

  auto* selftest = app.add_subcommand("selftest", "run the oracle and gradient suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*synth) return run_synth(flags, sc);
    if (*train_cmd) return run_train(flags, split, resume);
    if (*eval_cmd) return run_eval(flags, checkpoint, eval_split, predictions, zero_prefix);
    if (*infer_cmd) return run_infer(flags, checkpoint, image, emotion);
    if (*selftest) return run_selftest();
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ImageIoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitValidation;
}

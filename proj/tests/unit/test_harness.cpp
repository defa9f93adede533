#include <doctest.h>

#include "stimseg/checks.hpp"
#include "stimseg/trainer.hpp"
#include "helpers.hpp"

#include <cmath>
#include <fstream>

using namespace stimseg;
using stimseg::testing::TempDir;
using stimseg::testing::read_file;
using stimseg::testing::small_config;
using stimseg::testing::small_vocab;

namespace {

std::vector<Sample> random_samples(const ModelConfig& cfg, const Vocabulary& vocab, int n,
                                   std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) {
    Sample s = checks::random_sample(cfg, vocab, EmotionId(i % kNumEmotions), 7, rng);
    s.image_path = "images/" + std::to_string(i) + ".png";
    out.push_back(std::move(s));
  }
  return out;
}

TrainConfig quick_train() {
  TrainConfig t = TrainConfig::toy(Paradigm::SingleMask);
  t.epochs = 2;
  t.max_updates = 0;
  t.per_step_batch = 2;
  t.accumulation = 2;
  t.seed = 5;
  return t;
}

std::map<std::string, Matrix> snapshot(const StimulusModel& m) {
  std::map<std::string, Matrix> out;
  for (const auto& p : m.params().items()) out[p.name] = p.tensor.value();
  return out;
}

std::map<std::string, Matrix> gradients(StimulusModel& m) {
  std::map<std::string, Matrix> out;
  for (auto& p : m.params().items())
    if (p.tensor.has_grad()) out[p.name] = p.tensor.grad();
  return out;
}

}  // namespace

TEST_CASE("config overrides") {
  ModelConfig m = ModelConfig::toy();
  TrainConfig t = TrainConfig::toy(Paradigm::SingleMask);
  apply_overrides(parse_key_values("# comment\nd_k = 64\nlr_lang=0.001\nfreeze_mixer = true\n"), m, t);
  CHECK(m.d_k == 64);
  CHECK(t.lr_lang == 0.001);
  CHECK(m.freeze.mixer);
  CHECK_THROWS_AS(apply_overrides({{"no_such_key", "1"}}, m, t), ConfigError);
  CHECK_THROWS_AS(apply_overrides({{"d_k", "big"}}, m, t), ConfigError);
  CHECK_THROWS_AS(apply_overrides({{"accumulation", "0"}}, m, t), ConfigError);
  CHECK_THROWS_AS(parse_key_values("just words\n"), ConfigError);

  ModelConfig bad = ModelConfig::toy();
  bad.seg_grid = 12;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ModelConfig::toy();
  bad.d_h = 32;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_preset("huge"), ConfigError);
  CHECK_THROWS_AS(paradigm_from_string("both"), ConfigError);
}

TEST_CASE("presets") {
  const ModelConfig p = ModelConfig::paper();
  p.validate();
  CHECK(p.saliency_size() == 256);
  CHECK(p.d_w == 768);
  CHECK(p.freeze.encoder);
  CHECK(p.freeze.mixer);
  CHECK_FALSE(p.freeze.mask_head);
  const TrainConfig ts = TrainConfig::paper(Paradigm::SingleMask);
  const TrainConfig tm = TrainConfig::paper(Paradigm::MultiMasks);
  CHECK(ts.lr_lang == 2e-4);
  CHECK(ts.lr_seg == 1e-4);
  CHECK(tm.lr_seg == 8e-5);
  CHECK(ts.effective_batch() == 16);
  ModelConfig toy = ModelConfig::toy();
  toy.validate();
  CHECK_FALSE(toy.freeze.encoder);
  CHECK(ModelConfig::from_json(p.to_json()).to_json() == p.to_json());
  CHECK(TrainConfig::from_json(tm.to_json()).to_json() == tm.to_json());
}

TEST_CASE("accumulated micro-batches equal one large batch") {
  const ModelConfig cfg = small_config(Paradigm::SingleMask);
  const Vocabulary vocab = small_vocab();
  const auto samples = random_samples(cfg, vocab, 16, 1);
  const auto units = training_units(Paradigm::SingleMask, samples);
  REQUIRE(units.size() == 16);

  // 4 x 4: four micro-batches, each scaled by the effective batch
  StimulusModel a(cfg, vocab);
  for (int k = 0; k < 4; ++k) {
    accumulate_gradients(a, samples, std::span(units).subspan(static_cast<std::size_t>(4 * k), 4), 1.0 / 16);
  }
  // 1 x 16: a single graph over the whole batch
  StimulusModel b(cfg, vocab);
  Tensor total;
  for (const auto& u : units) {
    const Tensor t = b.single_mask_loss(samples[u[0]]).total_tensor;
    total = total.defined() ? ops::add(total, t) : t;
  }
  ops::scale(total, 1.0 / 16).backward();

  const auto ga = gradients(a);
  const auto gb = gradients(b);
  REQUIRE(ga.size() == gb.size());
  double worst = 0.0;
  for (const auto& [name, g] : ga) {
    const double denom = std::max(g.norm(), 1e-12);
    worst = std::max(worst, (g - gb.at(name)).norm() / denom);
  }
  CHECK(worst < 1e-6);

  TrainConfig tc = TrainConfig::toy(Paradigm::SingleMask);
  AdamW oa(tc), ob(tc);
  oa.step(a.params());
  ob.step(b.params());
  const auto pa = snapshot(a);
  const auto pb = snapshot(b);
  for (const auto& [name, v] : pa) CHECK((v - pb.at(name)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("frozen groups are untouched by an update") {
  ModelConfig cfg = small_config(Paradigm::SingleMask);
  cfg.freeze = FreezeFlags{true, true, false};
  const Vocabulary vocab = small_vocab();
  StimulusModel model(cfg, vocab);
  const auto before = snapshot(model);
  const auto samples = random_samples(cfg, vocab, 4, 2);
  const auto units = training_units(Paradigm::SingleMask, samples);
  accumulate_gradients(model, samples, units, 0.25);
  AdamW opt(TrainConfig::toy(Paradigm::SingleMask));
  opt.step(model.params());
  int frozen = 0, moved = 0;
  for (const auto& p : model.params().items()) {
    const bool same = p.tensor.value() == before.at(p.name);
    if (p.group == ParamGroup::Encoder || p.group == ParamGroup::Mixer) {
      CHECK_MESSAGE(same, p.name);
      ++frozen;
    } else if (p.group == ParamGroup::MaskHead) {
      moved += same ? 0 : 1;
    }
  }
  CHECK(frozen > 0);
  CHECK(moved > 0);
}

TEST_CASE("optimiser uses the language rate for the language group") {
  TrainConfig t;
  t.lr_lang = 0.5;
  t.lr_seg = 0.25;
  const AdamW opt(t);
  CHECK(opt.lr_for(ParamGroup::Language) == 0.5);
  CHECK(opt.lr_for(ParamGroup::Adapter) == 0.25);
  CHECK(opt.lr_for(ParamGroup::MaskHead) == 0.25);
}

TEST_CASE("checkpoint round trip") {
  TempDir dir("ckpt");
  const ModelConfig cfg = small_config(Paradigm::MultiMasks);
  StimulusModel model(cfg, small_vocab());
  Rng rng(3);
  checks::randomize(model.params(), rng, 0.3);
  save_checkpoint(dir.path() / "m.bin", model);
  const Checkpoint ck = load_checkpoint(dir.path() / "m.bin");
  CHECK(ck.model->config().to_json() == cfg.to_json());
  CHECK(ck.model->vocab() == model.vocab());
  CHECK_FALSE(ck.state.has_value());
  CHECK(snapshot(*ck.model) == snapshot(model));

  // truncated and foreign files are refused
  const std::string bytes = read_file(dir.path() / "m.bin");
  std::ofstream(dir.path() / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS(load_checkpoint(dir.path() / "short.bin"));
  std::ofstream(dir.path() / "junk.bin", std::ios::binary) << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "junk.bin"), CheckpointError);
  CHECK_THROWS(load_checkpoint(dir.path() / "absent.bin"));
}

TEST_CASE("resuming continues the loss trajectory") {
  const ModelConfig cfg = small_config(Paradigm::SingleMask);
  const Vocabulary vocab = small_vocab();
  const auto samples = random_samples(cfg, vocab, 8, 4);
  const TrainConfig tc = quick_train();

  TempDir full_dir("full");
  TrainOptions full;
  full.out_dir = full_dir.path();
  const TrainResult a = train(cfg, tc, samples, vocab, full);
  REQUIRE(a.steps.size() == 4);

  TempDir part_dir("part");
  TrainOptions first;
  first.out_dir = part_dir.path();
  first.stop_after_epochs = 1;
  const TrainResult b1 = train(cfg, tc, samples, vocab, first);
  CHECK(b1.epochs_done == 1);
  TrainOptions second;
  second.out_dir = part_dir.path();
  second.resume = part_dir.path() / "checkpoint.bin";
  const TrainResult b2 = train(cfg, tc, samples, vocab, second);
  REQUIRE(b2.steps.size() == 2);
  CHECK(std::abs(b2.steps[0].total - a.steps[2].total) < 1e-5);
  CHECK(std::abs(b2.steps[1].total - a.steps[3].total) < 1e-5);
  CHECK(snapshot(*b2.model) == snapshot(*a.model));

  // a resume with a different grid is refused
  ModelConfig other = cfg;
  other.seg_grid = 2;
  other.image_size = 32;
  CHECK_THROWS_AS(train(other, tc, samples, vocab, second), ConfigError);
}

TEST_CASE("non-finite losses abort with a batch dump") {
  const ModelConfig cfg = small_config(Paradigm::SingleMask);
  const Vocabulary vocab = small_vocab();
  auto samples = random_samples(cfg, vocab, 4, 5);
  samples[2].image.pixels[7] = std::nan("");
  TempDir dir("nan");
  TrainOptions opts;
  opts.out_dir = dir.path();
  CHECK_THROWS_AS(train(cfg, quick_train(), samples, vocab, opts), NumericalError);
  REQUIRE(std::filesystem::exists(dir.path() / "nan_dump.json"));
  const auto dump = nlohmann::json::parse(read_file(dir.path() / "nan_dump.json"));
  bool found = false;
  for (const auto& item : dump["batch"]) found = found || item["image_path"] == "images/2.png";
  CHECK(found);
}

TEST_CASE("training is deterministic and logs every update") {
  const ModelConfig cfg = small_config(Paradigm::MultiMasks);
  const Vocabulary vocab = small_vocab();
  auto samples = random_samples(cfg, vocab, 8, 6);
  for (std::size_t i = 1; i < samples.size(); i += 2) {
    samples[i].image = samples[i - 1].image;
    samples[i].image_path = samples[i - 1].image_path;
  }
  TempDir d1("det1"), d2("det2");
  TrainOptions o1, o2;
  o1.out_dir = d1.path();
  o2.out_dir = d2.path();
  TrainConfig tc = quick_train();
  tc.per_step_batch = 1;
  const TrainResult a = train(cfg, tc, samples, vocab, o1);
  const TrainResult b = train(cfg, tc, samples, vocab, o2);
  CHECK(snapshot(*a.model) == snapshot(*b.model));
  CHECK(read_file(d1.path() / "steps.jsonl") == read_file(d2.path() / "steps.jsonl"));
  CHECK(read_file(d1.path() / "checkpoint.bin") == read_file(d2.path() / "checkpoint.bin"));
  // four images, two per update, two epochs
  CHECK(a.steps.size() == 4);
  const auto first = nlohmann::json::parse(read_file(d1.path() / "steps.jsonl").substr(0, read_file(d1.path() / "steps.jsonl").find('\n')));
  for (const char* key : {"step", "dice", "focal", "lang", "total", "lr"}) CHECK(first.contains(key));
}

TEST_CASE("update cap stops training") {
  const ModelConfig cfg = small_config(Paradigm::SingleMask);
  const Vocabulary vocab = small_vocab();
  const auto samples = random_samples(cfg, vocab, 8, 7);
  TrainConfig tc = quick_train();
  tc.epochs = 50;
  tc.max_updates = 3;
  const TrainResult r = train(cfg, tc, samples, vocab, {});
  CHECK(r.updates == 3);
}

TEST_CASE("oracle and empty predictions score at the extremes") {
  TempDir dir("score");
  SynthConfig sc;
  sc.per_emotion = 1;
  const Manifest m = synthesize(sc, 3, dir.path());
  const auto gold = load_samples(m, build_vocabulary(m.explanations()), 25, 64);
  std::vector<Prediction> oracle, empty;
  for (const auto& s : gold) {
    oracle.push_back({s.image_path, s.emotion, s.mask, s.explanation, {}});
    empty.push_back({s.image_path, s.emotion, BinaryMask(64, 64), s.explanation, {}});
  }
  const EvalReport best = score_predictions(oracle, gold);
  CHECK(best.seg_p25 == 100.0);
  CHECK(best.seg_p50 == 100.0);
  CHECK(best.bleu[0] == 100.0);
  CHECK(best.ea == 100.0);
  const EvalReport worst = score_predictions(empty, gold);
  CHECK(worst.seg_p25 == 0.0);
  CHECK(worst.seg_p50 == 0.0);
  oracle.pop_back();
  CHECK_THROWS(score_predictions(oracle, gold));
}

TEST_CASE("predictions file is read relative to its directory") {
  TempDir dir("preds");
  BinaryMask mask(4, 4);
  mask.at(1, 2) = 1;
  std::filesystem::create_directories(dir.path() / "p");
  write_png_mask(dir.path() / "p" / "a.png", mask);
  std::ofstream(dir.path() / "preds.jsonl")
      << R"({"image_path":"images/x.png","mask_path":"p/a.png","explanation":"so much fear","emotion":"fear"})"
      << "\n";
  const auto preds = read_predictions(dir.path() / "preds.jsonl");
  REQUIRE(preds.size() == 1);
  CHECK(preds[0].mask == mask);
  CHECK(preds[0].emotion == EmotionId(6));
  std::ofstream(dir.path() / "bad.jsonl") << R"({"mask_path":"p/a.png","emotion":"joy","explanation":"x"})" << "\n";
  CHECK_THROWS_AS(read_predictions(dir.path() / "bad.jsonl"), LoadError);
}

TEST_CASE("inference writes one artifact set per emotion") {
  const Vocabulary vocab = small_vocab();
  Rng rng(8);
  Image img(16, 16);
  for (auto& v : img.pixels) v = rng.uniform();

  const StimulusModel single(small_config(Paradigm::SingleMask), vocab);
  TempDir d1("infer1");
  const InferOutput a = infer(single, img, EmotionId(6), d1.path(), 3);
  CHECK(a.files.size() == 4);
  std::size_t on_disk = 0;
  for (const auto& e : std::filesystem::directory_iterator(d1.path())) on_disk += e.is_regular_file();
  CHECK(on_disk == 4);
  CHECK(a.result["emotion"] == "fear");
  const InferOutput again = infer(single, img, EmotionId(6), d1.path(), 3);
  CHECK(again.result.dump() == a.result.dump());
  CHECK_THROWS(infer(single, img, std::nullopt, d1.path(), 3));

  const StimulusModel multi(small_config(Paradigm::MultiMasks), vocab);
  TempDir d2("infer2");
  const InferOutput b = infer(multi, img, std::nullopt, d2.path(), 3);
  CHECK(b.files.size() == 25);
  CHECK(b.result["results"].size() == 8);

  // off-size inputs are resized for the model and masks come back at input size
  Image big(32, 48);
  for (auto& v : big.pixels) v = rng.uniform();
  TempDir d3("infer3");
  infer(single, big, EmotionId(1), d3.path(), 3);
  const BinaryMask mask = read_png_mask(d3.path() / "result_awe_mask.png");
  CHECK(mask.height == 32);
  CHECK(mask.width == 48);
}

TEST_CASE("evaluation leaves the dataset directory unchanged") {
  TempDir dir("ro");
  SynthConfig sc;
  sc.per_emotion = 1;
  sc.image_size = 64;
  const Manifest m = synthesize(sc, 9, dir.path());
  std::map<std::string, std::string> before;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir.path()))
    if (e.is_regular_file()) before[e.path().string()] = read_file(e.path());
  const Vocabulary vocab = model_vocabulary(m.explanations());
  const auto samples = load_manifest(dir.path() / "manifest.jsonl", vocab, 25, 64);
  const StimulusModel model(ModelConfig::toy(), vocab);
  const EvalOutput out = evaluate(model, samples, {});
  CHECK(out.predictions.size() == samples.size());
  CHECK(out.report.count == static_cast<int>(samples.size()));
  std::map<std::string, std::string> after;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir.path()))
    if (e.is_regular_file()) after[e.path().string()] = read_file(e.path());
  CHECK(before == after);
}

TEST_CASE("run record carries config, code version and steps") {
  const std::vector<StepLog> steps{{1, 0.5, 0.1, 2.0, 2.6, 1e-4, 2e-4}};
  const auto j = run_record(ModelConfig::toy(), TrainConfig::toy(Paradigm::SingleMask), steps, std::nullopt);
  CHECK(j["config"]["model"]["d_k"] == 32);
  CHECK(std::string(j["code_version"]).size() == 64);
  CHECK(j["steps"].size() == 1);
  CHECK(j["steps"][0]["lr"]["lang"] == 2e-4);
}

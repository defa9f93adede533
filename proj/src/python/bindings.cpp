#include "stimseg/checks.hpp"
#include "stimseg/trainer.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <fstream>

namespace py = pybind11;
using namespace stimseg;

namespace {

py::object to_python(const nlohmann::ordered_json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::ordered_json report_json(const EvalReport& r) {
  nlohmann::ordered_json j = r.to_json();
  j.erase("seg_ious");
  j.erase("bbox_ious");
  return j;
}

EmotionId emotion_arg(const std::string& name) {
  const auto e = emotion_from_name(name);
  if (!e) throw py::value_error("unknown emotion '" + name + "'");
  return *e;
}

// Accepts H x W x 3 arrays of uint8 (0..255) or floats (0..1).
Image image_from_array(const py::array& arr) {
  if (arr.ndim() != 3 || arr.shape(2) != 3) throw py::value_error("image must be H x W x 3");
  const int h = static_cast<int>(arr.shape(0));
  const int w = static_cast<int>(arr.shape(1));
  Image img(h, w);
  if (py::isinstance<py::array_t<std::uint8_t>>(arr)) {
    const auto a = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>(arr);
    const auto* p = a.data();
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = p[i] / 255.0;
  } else {
    const auto a = py::array_t<double, py::array::c_style | py::array::forcecast>(arr);
    std::copy(a.data(), a.data() + img.pixels.size(), img.pixels.begin());
  }
  return img;
}

BinaryMask mask_from_array(const py::array& arr) {
  if (arr.ndim() != 2) throw py::value_error("mask must be 2-D");
  const auto a = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>(arr);
  BinaryMask m(static_cast<int>(arr.shape(0)), static_cast<int>(arr.shape(1)));
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = a.data()[i] ? 1 : 0;
  return m;
}

py::array_t<bool> mask_to_array(const BinaryMask& m) {
  py::array_t<bool> out({m.height, m.width});
  auto* p = out.mutable_data();
  for (std::size_t i = 0; i < m.data.size(); ++i) p[i] = m.data[i] != 0;
  return out;
}

Matrix matrix_from_array(const py::array& arr) {
  if (arr.ndim() != 2) throw py::value_error("expected a 2-D array");
  const auto a = py::array_t<double, py::array::c_style | py::array::forcecast>(arr);
  Matrix m(arr.shape(0), arr.shape(1));
  std::copy(a.data(), a.data() + m.size(), m.data());
  return m;
}

std::vector<Sample> split_samples(const Manifest& manifest, const Vocabulary& vocab,
                                  const ModelConfig& cfg, const std::string& split) {
  Manifest subset{manifest.root, {}};
  for (const auto& r : manifest.records)
    if (split == "all" || r.split == split) subset.records.push_back(r);
  if (subset.records.empty()) throw ConfigError("no records in split '" + split + "'");
  return load_samples(subset, vocab, cfg.max_len, cfg.image_size);
}

class PyModel {
 public:
  explicit PyModel(std::unique_ptr<StimulusModel> m) : model_(std::move(m)) {}

  static PyModel load(const std::filesystem::path& path) {
    return PyModel(load_checkpoint(path).model);
  }

  static PyModel create(const std::string& preset, const std::string& mode,
                        const std::vector<std::string>& explanations, std::uint64_t seed) {
    ModelConfig cfg = ModelConfig::from_preset(preset);
    cfg.paradigm = paradigm_from_string(mode);
    cfg.init_seed = seed;
    return PyModel(std::make_unique<StimulusModel>(cfg, model_vocabulary(explanations)));
  }

  py::object config() const { return to_python(model_->config().to_json()); }
  std::vector<std::string> vocabulary() const { return model_->vocab().tokens(); }
  std::size_t parameter_count() const { return model_->params().scalar_count(); }

  py::dict segment(const py::array& image, const std::optional<std::string>& emotion) const {
    NoGradGuard no_grad;
    const Image img = image_from_array(image);
    std::optional<EmotionId> e;
    if (emotion) e = emotion_arg(*emotion);
    const SegmentOutput out = model_->segment(img, e);
    const std::size_t n = out.masks.size();
    py::array_t<double> sal({static_cast<py::ssize_t>(n), static_cast<py::ssize_t>(img.height),
                             static_cast<py::ssize_t>(img.width)});
    py::array_t<bool> masks({static_cast<py::ssize_t>(n), static_cast<py::ssize_t>(img.height),
                             static_cast<py::ssize_t>(img.width)});
    const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
    for (std::size_t k = 0; k < n; ++k) {
      std::copy(out.saliency_resized[k].begin(), out.saliency_resized[k].end(),
                sal.mutable_data() + k * plane);
      for (std::size_t i = 0; i < plane; ++i) masks.mutable_data()[k * plane + i] = out.masks[k].data[i] != 0;
    }
    py::list names;
    for (const auto& em : out.emotions) names.append(std::string(em.name()));
    py::dict d;
    d["emotions"] = names;
    d["saliency"] = sal;
    d["masks"] = masks;
    return d;
  }

  py::object infer(const py::array& image, const std::optional<std::string>& emotion,
                   const std::filesystem::path& out_dir, std::uint64_t seed,
                   const std::string& stem) const {
    std::optional<EmotionId> e;
    if (emotion) e = emotion_arg(*emotion);
    const InferOutput out = stimseg::infer(*model_, image_from_array(image), e, out_dir, seed, stem);
    return to_python(out.result);
  }

  py::object evaluate(const std::filesystem::path& manifest_path, const std::string& split,
                      bool zero_prefix, std::uint64_t eval_seed) const {
    const Manifest manifest = read_manifest(manifest_path);
    const auto samples = split_samples(manifest, model_->vocab(), model_->config(), split);
    return to_python(report_json(stimseg::evaluate(*model_, samples, {eval_seed, zero_prefix}).report));
  }

  void save(const std::filesystem::path& path) const { save_checkpoint(path, *model_); }

 private:
  std::unique_ptr<StimulusModel> model_;
};

py::dict train_run(const std::filesystem::path& manifest_path, const std::filesystem::path& out_dir,
                   const std::string& preset, const std::string& mode, std::uint64_t seed,
                   const std::map<std::string, std::string>& overrides) {
  ModelConfig mc = ModelConfig::from_preset(preset);
  mc.paradigm = paradigm_from_string(mode);
  TrainConfig tc = TrainConfig::for_preset(preset, mc.paradigm);
  tc.seed = seed;
  mc.init_seed = seed;
  apply_overrides(overrides, mc, tc);
  mc.validate();
  const Manifest manifest = read_manifest(manifest_path);
  std::vector<std::string> texts;
  for (const auto& r : manifest.records)
    if (r.split == "train") texts.push_back(r.explanation);
  const Vocabulary vocab = model_vocabulary(texts);
  const auto samples = split_samples(manifest, vocab, mc, "train");
  TrainOptions opts;
  opts.out_dir = out_dir;
  TrainResult res;
  {
    py::gil_scoped_release release;
    res = stimseg::train(mc, tc, samples, vocab, opts);
  }
  std::ofstream(out_dir / "run_record.json") << run_record(mc, tc, res.steps, std::nullopt).dump(2) << "\n";
  py::list steps;
  for (const auto& s : res.steps) steps.append(to_python(s.to_json()));
  py::dict d;
  d["updates"] = res.updates;
  d["epochs"] = res.epochs_done;
  d["steps"] = steps;
  d["checkpoint"] = (out_dir / "checkpoint.bin").string();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Emotion-prompted segmentation and explanation (C++ core)";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<LoadError>(m, "LoadError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_IOError);

  m.attr("EMOTIONS") = [] {
    py::list l;
    for (auto n : kEmotionNames) l.append(std::string(n));
    return l;
  }();
  m.attr("code_version") = code_version();

  m.def(
      "synthesize",
      [](const std::filesystem::path& root, std::uint64_t seed, int per_emotion, int image_size,
         int val_per_emotion, int test_per_emotion) {
        SynthConfig sc;
        sc.per_emotion = per_emotion;
        sc.image_size = image_size;
        sc.val_per_emotion = val_per_emotion;
        sc.test_per_emotion = test_per_emotion;
        return synthesize(sc, seed, root).records.size();
      },
      py::arg("root"), py::arg("seed") = 7, py::arg("per_emotion") = 4, py::arg("image_size") = 64,
      py::arg("val_per_emotion") = 0, py::arg("test_per_emotion") = 0,
      "Writes a synthetic corpus under root; returns the record count.");

  m.def(
      "read_manifest",
      [](const std::filesystem::path& path) {
        py::list out;
        for (const auto& r : read_manifest(path).records) {
          py::dict d;
          d["image_path"] = r.image_path;
          d["mask_path"] = r.mask_path;
          d["emotion"] = r.emotion;
          d["explanation"] = r.explanation;
          d["split"] = r.split;
          out.append(d);
        }
        return out;
      },
      py::arg("path"));

  m.def("train", &train_run, py::arg("manifest"), py::arg("out_dir"), py::arg("preset") = "toy",
        py::arg("mode") = "single", py::arg("seed") = 0,
        py::arg("overrides") = std::map<std::string, std::string>{},
        "Trains on the train split and writes checkpoint.bin, steps.jsonl and run_record.json.");

  py::class_<PyModel>(m, "Model")
      .def_static("load", &PyModel::load, py::arg("path"))
      .def_static("create", &PyModel::create, py::arg("preset") = "toy", py::arg("mode") = "single",
                  py::arg("explanations") = std::vector<std::string>{}, py::arg("seed") = 0)
      .def_property_readonly("config", &PyModel::config)
      .def_property_readonly("vocabulary", &PyModel::vocabulary)
      .def_property_readonly("parameter_count", &PyModel::parameter_count)
      .def("segment", &PyModel::segment, py::arg("image"), py::arg("emotion") = py::none())
      .def("infer", &PyModel::infer, py::arg("image"), py::arg("emotion") = py::none(),
           py::arg("out_dir"), py::arg("seed") = 0, py::arg("stem") = "result")
      .def("evaluate", &PyModel::evaluate, py::arg("manifest"), py::arg("split") = "train",
           py::arg("zero_prefix") = false, py::arg("eval_seed") = 1234)
      .def("save", &PyModel::save, py::arg("path"));

  m.def("iou", [](const py::array& a, const py::array& b) {
    return iou(mask_from_array(a), mask_from_array(b));
  });
  m.def("bbox", [](const py::array& a) -> std::optional<std::tuple<int, int, int, int>> {
    const auto b = bbox_from_mask(mask_from_array(a));
    if (!b) return std::nullopt;
    return std::make_tuple(b->row_min, b->row_max, b->col_min, b->col_max);
  });
  m.def("p_at_k", [](const std::vector<double>& ious, double t) { return p_at_k(ious, t); },
        py::arg("ious"), py::arg("threshold"));
  m.def("bleu", [](const std::string& c, const std::string& r, int n) {
    return bleu_n(tokenize(c), tokenize(r), n);
  }, py::arg("candidate"), py::arg("reference"), py::arg("n") = 4);
  m.def("rouge_l", [](const std::string& c, const std::string& r) {
    return rouge_l(tokenize(c), tokenize(r));
  }, py::arg("candidate"), py::arg("reference"));
  m.def("keyword_emotion", [](const std::string& text) -> std::optional<std::string> {
    const auto e = keyword_emotion(text);
    if (!e) return std::nullopt;
    return std::string(e->name());
  });
  m.def("emotion_alignment",
        [](const std::vector<std::string>& texts, const std::vector<std::string>& gold) {
          std::vector<EmotionId> ids;
          for (const auto& g : gold) ids.push_back(emotion_arg(g));
          return emotion_alignment(texts, ids);
        });
  m.def("dice_loss", [](const py::array& logits, const py::array& target, double eps) {
    NoGradGuard no_grad;
    return dice_loss(Tensor(matrix_from_array(logits)), matrix_from_array(target), eps).item();
  }, py::arg("logits"), py::arg("target"), py::arg("eps") = 1.0);
  m.def("focal_loss", [](const py::array& logits, const py::array& target, double alpha, double gamma) {
    NoGradGuard no_grad;
    return focal_loss(Tensor(matrix_from_array(logits)), matrix_from_array(target),
                      FocalParams::standard(alpha, gamma)).item();
  }, py::arg("logits"), py::arg("target"), py::arg("alpha") = 0.25, py::arg("gamma") = 2.0);

  m.def("selftest", [] {
    py::list out;
    for (const auto& suite : {checks::oracle_suite(), checks::gradient_suite(),
                              checks::identity_suite(), checks::metric_suite()}) {
      for (const auto& r : suite) {
        py::dict d;
        d["name"] = r.name;
        d["passed"] = r.passed;
        d["worst"] = r.worst;
        d["seconds"] = r.seconds;
        out.append(d);
      }
    }
    return out;
  }, "Runs the oracle, gradient, identity and metric checks.");
}

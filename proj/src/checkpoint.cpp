#include "stimseg/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace stimseg {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'I', 'M', 'S', 'G', 'C', 'K'};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw CheckpointError("truncated checkpoint " + path.string());
  }
  return v;
}

struct Entry {
  std::string kind;  // "param", "adam_m", "adam_v"
  std::string name;
  const Matrix* data;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const StimulusModel& model,
                     const TrainState* state) {
  std::vector<Entry> entries;
  for (const auto& p : model.params().items()) entries.push_back({"param", p.name, &p.tensor.value()});
  nlohmann::json header;
  header["model"] = model.config().to_json();
  header["vocab"] = model.vocab().to_json();
  if (state) {
    header["train"] = state->train.to_json();
    header["epochs_done"] = state->epochs_done;
    header["updates"] = state->updates;
    header["adam_steps"] = state->adam_steps;
    for (const auto& [name, mom] : state->moments) {
      entries.push_back({"adam_m", name, &mom.m});
      entries.push_back({"adam_v", name, &mom.v});
    }
  }
  nlohmann::json dir = nlohmann::json::array();
  for (const auto& e : entries) {
    dir.push_back({{"kind", e.kind}, {"name", e.name}, {"rows", e.data->rows()},
                   {"cols", e.data->cols()}});
  }
  header["arrays"] = dir;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw CheckpointError("cannot write " + tmp.string());
    os.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(os, kCheckpointVersion);
    write_pod<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : entries) {
      os.write(reinterpret_cast<const char*>(e.data->data()),
               static_cast<std::streamsize>(e.data->size() * sizeof(double)));
    }
    if (!os) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw CheckpointError(path.string() + " is not a stimseg checkpoint");
  }
  const auto version = read_pod<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto size = read_pod<std::uint64_t>(is, path);
  std::string text(size, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(size))) {
    throw CheckpointError("truncated checkpoint header in " + path.string());
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("corrupt checkpoint header: " + std::string(e.what()));
  }

  Checkpoint ck;
  ck.model = std::make_unique<StimulusModel>(ModelConfig::from_json(header.at("model")),
                                           Vocabulary::from_json(header.at("vocab")));
  if (header.contains("train")) {
    TrainState st;
    st.train = TrainConfig::from_json(header.at("train"));
    st.epochs_done = header.at("epochs_done").get<int>();
    st.updates = header.at("updates").get<std::int64_t>();
    st.adam_steps = header.at("adam_steps").get<std::int64_t>();
    ck.state = std::move(st);
  }

  auto& params = ck.model->params();
  std::size_t seen = 0;
  for (const auto& a : header.at("arrays")) {
    const auto kind = a.at("kind").get<std::string>();
    const auto name = a.at("name").get<std::string>();
    const auto rows = a.at("rows").get<Index>();
    const auto cols = a.at("cols").get<Index>();
    Matrix m(rows, cols);
    if (!is.read(reinterpret_cast<char*>(m.data()),
                 static_cast<std::streamsize>(m.size() * sizeof(double)))) {
      throw CheckpointError("truncated data for " + name);
    }
    if (kind == "param") {
      if (!params.contains(name)) throw CheckpointError("unknown parameter " + name);
      Tensor& t = params.get(name);
      if (t.rows() != rows || t.cols() != cols) {
        throw CheckpointError("parameter " + name + " has shape " + std::to_string(rows) + "x" +
                              std::to_string(cols) + ", model expects " +
                              std::to_string(t.rows()) + "x" + std::to_string(t.cols()));
      }
      t.mutable_value() = std::move(m);
      ++seen;
    } else if (ck.state && (kind == "adam_m" || kind == "adam_v")) {
      auto& mom = ck.state->moments[name];
      (kind == "adam_m" ? mom.m : mom.v) = std::move(m);
    } else {
      throw CheckpointError("unexpected array kind " + kind);
    }
  }
  if (seen != params.items().size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(seen) + " of " +
                          std::to_string(params.items().size()) + " parameters");
  }
  return ck;
}

}  // namespace stimseg

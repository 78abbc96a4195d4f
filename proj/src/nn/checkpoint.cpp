#include "cassensing/nn/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace cas::nn {

namespace fs = std::filesystem;
using nlohmann::json;

const CheckpointTensor& Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) {
      return t;
    }
  }
  throw FormatError("checkpoint has no tensor named " + name);
}

void write_checkpoint(const fs::path& manifest_path, const Checkpoint& ckpt) {
  if (manifest_path.has_parent_path()) {
    fs::create_directories(manifest_path.parent_path());
  }
  const fs::path blob_path = fs::path(manifest_path).replace_extension(".bin");
  json tensors = json::array();
  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  if (!blob) {
    throw FormatError("cannot write " + blob_path.string());
  }
  std::size_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    std::size_t expected = 1;
    for (int d : t.shape) {
      expected *= static_cast<std::size_t>(d);
    }
    if (expected != t.data.size()) {
      throw ShapeError("checkpoint tensor " + t.name + " data does not match its shape");
    }
    tensors.push_back(json{{"name", t.name}, {"shape", t.shape}, {"dtype", "f32le"}, {"offset", offset}});
    blob.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    offset += t.data.size() * sizeof(float);
  }
  if (!blob) {
    throw FormatError("short write to " + blob_path.string());
  }
  json manifest{{"format_version", 1}, {"blob", blob_path.filename().string()}, {"tensors", tensors}, {"meta", ckpt.meta}};
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) {
    throw FormatError("cannot write " + manifest_path.string());
  }
  out << manifest.dump(2) << '\n';
}

Checkpoint read_checkpoint(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) {
    throw FormatError("cannot open checkpoint " + manifest_path.string());
  }
  Checkpoint ckpt;
  try {
    const json manifest = json::parse(in);
    if (manifest.at("format_version").get<int>() != 1) {
      throw FormatError("unsupported checkpoint format_version in " + manifest_path.string());
    }
    const fs::path blob_path = manifest_path.parent_path() / manifest.at("blob").get<std::string>();
    std::ifstream bin(blob_path, std::ios::binary);
    if (!bin) {
      throw FormatError("cannot open checkpoint blob " + blob_path.string());
    }
    const std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    ckpt.meta = manifest.value("meta", json::object());
    for (const json& t : manifest.at("tensors")) {
      CheckpointTensor tensor;
      tensor.name = t.at("name").get<std::string>();
      tensor.shape = t.at("shape").get<std::vector<int>>();
      if (t.at("dtype").get<std::string>() != "f32le") {
        throw FormatError("checkpoint tensor " + tensor.name + " has unsupported dtype");
      }
      const auto offset = t.at("offset").get<std::size_t>();
      std::size_t count = 1;
      for (int d : tensor.shape) {
        if (d < 0) {
          throw FormatError("negative dimension in checkpoint tensor " + tensor.name);
        }
        count *= static_cast<std::size_t>(d);
      }
      if (offset + count * sizeof(float) > bytes.size()) {
        throw ShapeError("checkpoint tensor " + tensor.name + " extends past the end of the blob");
      }
      tensor.data.resize(count);
      std::memcpy(tensor.data.data(), bytes.data() + offset, count * sizeof(float));
      for (float v : tensor.data) {
        if (!std::isfinite(v)) {
          throw FormatError("checkpoint tensor " + tensor.name + " holds non-finite values");
        }
      }
      ckpt.tensors.push_back(std::move(tensor));
    }
  } catch (const json::exception& e) {
    throw FormatError("malformed checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }
  return ckpt;
}

json train_config_to_json(const TrainConfig& cfg) {
  return json{{"learning_rate", cfg.learning_rate}, {"beta1", cfg.beta1},           {"beta2", cfg.beta2},
              {"epsilon", cfg.epsilon},             {"batch_size", cfg.batch_size}, {"epochs", cfg.epochs},
              {"seed", cfg.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig cfg;
  cfg.learning_rate = j.at("learning_rate").get<double>();
  cfg.beta1 = j.at("beta1").get<double>();
  cfg.beta2 = j.at("beta2").get<double>();
  cfg.epsilon = j.at("epsilon").get<double>();
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.epochs = j.at("epochs").get<int>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

}  // namespace cas::nn

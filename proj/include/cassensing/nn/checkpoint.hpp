#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cassensing/error.hpp"
#include "cassensing/nn/module.hpp"
#include "cassensing/nn/train.hpp"
#include "json.hpp"

namespace cas::nn {

// On disk a checkpoint is a JSON manifest
//   {"format_version":1, "blob":"<stem>.bin",
//    "tensors":[{"name","shape","dtype":"f32le","offset"}...], "meta":{...}}
// next to one raw little-endian float32 blob; offsets are in bytes.
struct CheckpointTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor& find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& manifest_path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& manifest_path);

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

template <class M>
void append_tensors(Checkpoint& ckpt, const M& module, const std::string& prefix) {
  for (const auto& p : param_refs(module)) {
    CheckpointTensor t{prefix + p.name, p.shape, std::vector<float>(p.data.size())};
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      t.data[i] = static_cast<float>(p.data[i]);
    }
    ckpt.tensors.push_back(std::move(t));
  }
}

// Copies the tensors named prefix + <param name> into `module`, checking
// shapes. Throws FormatError on a missing tensor or shape mismatch.
template <class M>
void load_tensors(const Checkpoint& ckpt, M& module, const std::string& prefix) {
  for (auto& p : param_refs(module)) {
    const CheckpointTensor& t = ckpt.find(prefix + p.name);
    if (t.shape != p.shape) {
      throw FormatError("checkpoint tensor " + t.name + " has a shape that does not match the model");
    }
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      p.data[i] = static_cast<typename M::Scalar>(t.data[i]);
    }
  }
}

}  // namespace cas::nn

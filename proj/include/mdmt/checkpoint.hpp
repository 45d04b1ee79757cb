#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mdmt/model.hpp"
#include "mdmt/optimizer.hpp"

namespace mdmt {

// Everything needed to rebuild a model and resume its training: a key/value
// metadata block plus a named float32 tensor archive (parameters and
// optimizer moments). Serialized as the "MDMTCK1" container with a trailing
// CRC32.
struct Checkpoint {
  uint32_t version = 1;
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>* find_tensor(const std::string& name) const;
  std::string meta_at(const std::string& key) const;  // throws IoError if absent
  bool has_meta(const std::string& key) const { return meta.count(key) > 0; }
};

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ck);
Checkpoint deserialize_checkpoint(const std::vector<uint8_t>& bytes);

void save_checkpoint_file(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint_file(const std::string& path);

// Snapshot of model + optimizer state. Training progress fields (epoch,
// early-stopping state) are added by the trainer.
Checkpoint make_checkpoint(Model<float>& model, const Optimizer<float>& model_opt,
                           const Optimizer<float>& fusion_opt);

Model<float> model_from_checkpoint(const Checkpoint& ck);
void optimizers_from_checkpoint(const Checkpoint& ck, Model<float>& model,
                                Optimizer<float>& model_opt, Optimizer<float>& fusion_opt);

// FNV-1a over a parameter group's raw float bytes; used to assert the
// alternation freeze contracts.
uint64_t hash_tensors(const std::vector<ParamRef<float>>& params);

}  // namespace mdmt

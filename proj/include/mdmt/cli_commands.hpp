#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mdmt/config.hpp"
#include "mdmt/dataset.hpp"
#include "mdmt/trainer.hpp"

namespace mdmt::cli {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;  // repeated --set key=value
  std::string out_dir = "runs";
  std::optional<uint64_t> seed;        // --seed
  std::vector<uint64_t> seeds;         // --seeds
  std::string checkpoint_path;         // eval / export-embeddings
};

Config load_config(const CommonArgs& args);

// train/valid/test splits resolved from the data.* keys (binary cache or CSV
// plus schema columns).
struct DataBundle {
  Dataset train, valid, test;
};
DataBundle load_data(const Config& cfg);

TrainConfig train_config_from(const Config& cfg, uint64_t seed);
SyntheticSpec synth_spec_from(const Config& cfg, std::optional<uint64_t> seed_override);

// Run directory <out>/<config-hash>-s<seed>, created on demand.
std::string run_dir(const std::string& out_dir, const Config& cfg, uint64_t seed);

int cmd_train(const CommonArgs& args);
int cmd_eval(const CommonArgs& args);
int cmd_ablate(const CommonArgs& args);
int cmd_synth(const CommonArgs& args);
int cmd_gradcheck(const CommonArgs& args);
int cmd_export_embeddings(const CommonArgs& args);

}  // namespace mdmt::cli

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mdmt/checkpoint.hpp"
#include "mdmt/dataset.hpp"
#include "mdmt/metrics.hpp"
#include "mdmt/model.hpp"
#include "mdmt/optimizer.hpp"

namespace mdmt {

struct TrainConfig {
  VariantKind variant = VariantKind::full;
  Hyper hyper;                 // D/T are overwritten from the dataset
  uint32_t epochs = 30;
  uint32_t batch_size = 256;
  float lr = 1e-2f;
  float fusion_lr = -1.0f;     // < 0: use the model learning rate
  OptimizerKind optimizer = OptimizerKind::adam;
  uint64_t seed = 42;
  uint32_t patience = 3;       // tolerated consecutive non-improving epochs

  float effective_fusion_lr() const { return fusion_lr < 0 ? lr : fusion_lr; }
  void validate() const;
};

struct EpochRecord {
  uint32_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  EvalReport valid;
  RealizedFusion<float> fusion;
  bool is_best = false;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  uint32_t best_epoch = 0;  // 0 when no epoch ran
  double best_val_auc = 0.0;
  bool stopped_early = false;
};

// One line per epoch plus a trailing summary line; byte-stable under a fixed
// config and seed.
std::string render_history(const TrainHistory& h);

// Batch label matrix (B, T) as a constant tensor.
template <typename S>
Tensor<S> batch_labels(const Dataset& ds, std::span<const uint32_t> rows) {
  Tensor<S> t = Tensor<S>::matrix(static_cast<Eigen::Index>(rows.size()),
                                  static_cast<Eigen::Index>(ds.space.task_count));
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto labs = ds.label_row(rows[i]);
    for (size_t k = 0; k < labs.size(); ++k) {
      t.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = static_cast<S>(labs[k]);
    }
  }
  return t;
}

// Mean over the batch of the per-sample sum over tasks of binary cross
// entropy; predictions are clamped to [1e-7, 1-1e-7] before the logs.
template <typename S>
Tensor<S> compute_loss(Tape<S>* tp, const Tensor<S>& predictions, const Tensor<S>& labels) {
  return bce_mean(tp, predictions, labels);
}

// One pass over the training batches, updating every parameter except the
// fusion logits. Returns the mean batch loss.
double train_model_epoch(Model<float>& model, Optimizer<float>& model_opt,
                         const Dataset& train, const TrainConfig& cfg, uint32_t epoch);

// One optimizer step on the fusion logits from a single training minibatch;
// all other parameters stay frozen. No-op for variants without trainable
// logits.
void update_fusion_logits(Model<float>& model, Optimizer<float>& fusion_opt,
                          const Dataset& train, const TrainConfig& cfg, uint32_t epoch);

struct FitResult {
  Model<float> model;        // state after the last epoch run
  Checkpoint best;           // full trainer state at the best validation epoch
  Checkpoint final_state;    // full trainer state after the last epoch (resume point)
  TrainHistory history;
};

// Bi-level alternation: a model epoch, then a fusion-logit step, then a
// validation pass, for cfg.epochs or until early stopping on validation
// overall AUC. Pass a checkpoint to resume a previous run (same config).
FitResult fit(const TrainConfig& cfg, const Dataset& train, const Dataset& valid,
              const Checkpoint* resume = nullptr);

struct SeedSweepResult {
  struct Run {
    uint64_t seed = 0;
    bool ok = false;
    std::string error;
    EvalReport report;
  };
  std::vector<Run> runs;

  std::vector<double> overall_aucs() const;
  std::vector<double> overall_loglosses() const;
};

// Independent fit + test evaluation per seed; failures are recorded per run
// rather than aborting the sweep.
SeedSweepResult seed_sweep(const TrainConfig& base, const Dataset& train, const Dataset& valid,
                           const Dataset& test, std::span<const uint64_t> seeds);

}  // namespace mdmt

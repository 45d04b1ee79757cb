#include "mdmt/trainer.hpp"

#include <cmath>
#include <sstream>

#include "mdmt/io_util.hpp"
#include "mdmt/rng.hpp"

namespace mdmt {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ValidationError("train.batch_size must be >= 1");
  if (lr <= 0) throw ValidationError("train.lr must be positive");
  if (fusion_lr > 0 && !std::isfinite(fusion_lr)) {
    throw ValidationError("train.fusion_lr must be finite");
  }
  if (!std::isfinite(lr)) throw ValidationError("train.lr must be finite");
}

namespace {

// Separate shuffle stream for the fusion minibatches so the outer step's
// data draw is independent of the model epoch's batch order.
constexpr uint64_t kFusionStream = 0xF05Eu;

}  // namespace

double train_model_epoch(Model<float>& model, Optimizer<float>& model_opt,
                         const Dataset& train, const TrainConfig& cfg, uint32_t epoch) {
  const auto batches = epoch_batches(train, cfg.batch_size, cfg.seed, epoch);
  auto params = model_phase_params(model);
  double total = 0.0;
  for (size_t b = 0; b < batches.size(); ++b) {
    try {
      Tape<float> tape;
      for (auto& p : params) tape.watch(*p.tensor);
      Tensor<float> preds = forward(&tape, model, train, batches[b].rows, batches[b].domain);
      Tensor<float> labels = batch_labels<float>(train, batches[b].rows);
      Tensor<float> loss = compute_loss(&tape, preds, labels);
      GradientMap<float> grads = backward(tape, loss);
      model_opt.step(params, grads, cfg.lr);
      total += static_cast<double>(loss.item());
    } catch (const NumericError& e) {
      throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                         ": " + e.what());
    }
  }
  return total / static_cast<double>(batches.size());
}

void update_fusion_logits(Model<float>& model, Optimizer<float>& fusion_opt,
                          const Dataset& train, const TrainConfig& cfg, uint32_t epoch) {
  auto fusion = fusion_phase_params(model);
  if (fusion.empty()) return;
  const auto batches =
      epoch_batches(train, cfg.batch_size, mix_seed(cfg.seed, kFusionStream), epoch);
  // Rotate through the interleaved batch list across epochs so every
  // domain's logits see gradient at a frequency matching its share of data.
  const Batch& batch = batches[epoch % batches.size()];
  try {
    Tape<float> tape;
    for (auto& p : fusion) tape.watch(*p.tensor);
    Tensor<float> preds = forward(&tape, model, train, batch.rows, batch.domain);
    Tensor<float> labels = batch_labels<float>(train, batch.rows);
    Tensor<float> loss = compute_loss(&tape, preds, labels);
    GradientMap<float> grads = backward(tape, loss);
    fusion_opt.step(fusion, grads, cfg.effective_fusion_lr());
  } catch (const NumericError& e) {
    throw NumericError("fusion update, epoch " + std::to_string(epoch) + ": " + e.what());
  }
}

namespace {

void append_progress_meta(Checkpoint& ck, const TrainConfig& cfg, uint32_t epochs_done,
                          uint32_t best_epoch, double best_val_auc, uint32_t since_best) {
  uint64_t auc_bits;
  std::memcpy(&auc_bits, &best_val_auc, 8);
  ck.meta["train.seed"] = std::to_string(cfg.seed);
  ck.meta["train.epochs_done"] = std::to_string(epochs_done);
  ck.meta["train.best_epoch"] = std::to_string(best_epoch);
  ck.meta["train.best_val_auc_bits"] = std::to_string(auc_bits);
  ck.meta["train.since_best"] = std::to_string(since_best);
}

}  // namespace

FitResult fit(const TrainConfig& cfg, const Dataset& train, const Dataset& valid,
              const Checkpoint* resume) {
  cfg.validate();
  if (train.space != valid.space) {
    throw ValidationError("fit: train and valid splits disagree on the feature space");
  }

  FitResult result;
  Optimizer<float> model_opt(cfg.optimizer);
  Optimizer<float> fusion_opt(cfg.optimizer);
  uint32_t start_epoch = 1;
  uint32_t best_epoch = 0;
  double best_val_auc = -1.0;
  uint32_t since_best = 0;

  if (resume != nullptr) {
    result.model = model_from_checkpoint(*resume);
    optimizers_from_checkpoint(*resume, result.model, model_opt, fusion_opt);
    if (std::stoull(resume->meta_at("train.seed")) != cfg.seed) {
      throw ValidationError("resume: checkpoint was trained with a different seed");
    }
    start_epoch = static_cast<uint32_t>(std::stoul(resume->meta_at("train.epochs_done"))) + 1;
    best_epoch = static_cast<uint32_t>(std::stoul(resume->meta_at("train.best_epoch")));
    since_best = static_cast<uint32_t>(std::stoul(resume->meta_at("train.since_best")));
    const uint64_t bits = std::stoull(resume->meta_at("train.best_val_auc_bits"));
    std::memcpy(&best_val_auc, &bits, 8);
  } else {
    result.model = build_variant<float>(cfg.variant, cfg.hyper, train.space, cfg.seed);
  }

  auto snapshot = [&](uint32_t epochs_done) {
    Checkpoint ck = make_checkpoint(result.model, model_opt, fusion_opt);
    append_progress_meta(ck, cfg, epochs_done, best_epoch, best_val_auc, since_best);
    return ck;
  };

  result.best = snapshot(start_epoch - 1);
  result.history.best_epoch = best_epoch;

  for (uint32_t epoch = start_epoch; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = train_model_epoch(result.model, model_opt, train, cfg, epoch);
    update_fusion_logits(result.model, fusion_opt, train, cfg, epoch);
    rec.valid = evaluate(result.model, valid);
    if (auto* core = std::get_if<M3oECore<float>>(&result.model)) {
      rec.fusion = realize_fusion_weights(*core);
    }
    if (rec.valid.overall_auc > best_val_auc) {
      best_val_auc = rec.valid.overall_auc;
      best_epoch = epoch;
      since_best = 0;
      rec.is_best = true;
      result.best = snapshot(epoch);
    } else {
      ++since_best;
    }
    result.history.epochs.push_back(std::move(rec));
    if (since_best > cfg.patience) {
      result.history.stopped_early = true;
      break;
    }
  }

  result.history.best_epoch = best_epoch;
  result.history.best_val_auc = best_epoch == 0 ? 0.0 : best_val_auc;
  const uint32_t epochs_done =
      result.history.epochs.empty() ? start_epoch - 1 : result.history.epochs.back().epoch;
  result.final_state = snapshot(epochs_done);
  return result;
}

std::string render_history(const TrainHistory& h) {
  std::ostringstream out;
  auto weights = [&](const std::vector<float>& v) {
    if (v.empty()) return std::string("-");
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) {
      if (i) s += ",";
      s += format_double(static_cast<double>(v[i]), 6);
    }
    return s;
  };
  for (const auto& rec : h.epochs) {
    out << "epoch=" << rec.epoch << " train_loss=" << format_double(rec.train_loss)
        << " val_auc=" << format_double(rec.valid.overall_auc)
        << " val_logloss=" << format_double(rec.valid.overall_logloss);
    for (const auto& p : rec.valid.pairs) {
      const std::string key = "_d" + std::to_string(p.domain) + "_t" + std::to_string(p.task);
      if (p.present) {
        out << " auc" << key << "=" << format_double(p.auc);
        out << " logloss" << key << "=" << format_double(p.logloss);
      } else {
        out << " auc" << key << "=absent logloss" << key << "=absent";
      }
    }
    out << " alpha_d=" << weights(rec.fusion.alpha_d) << " alpha_t=" << weights(rec.fusion.alpha_t)
        << " beta_d=" << weights(rec.fusion.beta_d) << " beta_t=" << weights(rec.fusion.beta_t)
        << " best=" << (rec.is_best ? 1 : 0) << "\n";
  }
  out << "summary=1 epochs_run=" << h.epochs.size() << " best_epoch=" << h.best_epoch
      << " best_val_auc=" << format_double(h.best_val_auc)
      << " stopped_early=" << (h.stopped_early ? 1 : 0) << "\n";
  return out.str();
}

std::vector<double> SeedSweepResult::overall_aucs() const {
  std::vector<double> out;
  for (const auto& r : runs) {
    if (r.ok) out.push_back(r.report.overall_auc);
  }
  return out;
}

std::vector<double> SeedSweepResult::overall_loglosses() const {
  std::vector<double> out;
  for (const auto& r : runs) {
    if (r.ok) out.push_back(r.report.overall_logloss);
  }
  return out;
}

SeedSweepResult seed_sweep(const TrainConfig& base, const Dataset& train, const Dataset& valid,
                           const Dataset& test, std::span<const uint64_t> seeds) {
  if (seeds.size() < 2) throw ValidationError("seed_sweep needs at least 2 seeds");
  SeedSweepResult out;
  for (uint64_t seed : seeds) {
    SeedSweepResult::Run run;
    run.seed = seed;
    try {
      TrainConfig cfg = base;
      cfg.seed = seed;
      FitResult fr = fit(cfg, train, valid);
      Model<float> best = model_from_checkpoint(fr.best);
      run.report = evaluate(best, test);
      run.ok = true;
    } catch (const std::exception& e) {
      run.ok = false;
      run.error = e.what();
    }
    out.runs.push_back(std::move(run));
  }
  return out;
}

}  // namespace mdmt

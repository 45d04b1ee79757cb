#include "mdmt/cli_commands.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mdmt/gradcheck.hpp"
#include "mdmt/io_util.hpp"
#include "mdmt/metrics.hpp"

namespace mdmt::cli {

namespace fs = std::filesystem;

Config load_config(const CommonArgs& args) {
  Config cfg;
  if (!args.config_path.empty()) cfg = Config::from_file(args.config_path);
  for (const auto& kv : args.overrides) cfg.apply_override(kv);
  return cfg;
}

namespace {

std::array<double, 3> split_ratios(const Config& cfg) {
  const auto parts = split_list(cfg.get_str("data.split", "0.8,0.1,0.1"));
  if (parts.size() != 3) throw ValidationError("data.split must list three ratios");
  std::array<double, 3> r{};
  for (int i = 0; i < 3; ++i) r[i] = std::stod(parts[i]);
  return r;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write file: " + path);
  out << text;
}

uint64_t seed_of(const CommonArgs& args, const Config& cfg) {
  if (args.seed.has_value()) return *args.seed;
  return cfg.get_u64("train.seed", 42);
}

std::vector<uint64_t> seeds_of(const CommonArgs& args, const Config& cfg) {
  if (!args.seeds.empty()) return args.seeds;
  std::vector<uint64_t> out;
  for (const auto& s : split_list(cfg.get_str("ablate.seeds", "1,2,3"))) {
    out.push_back(std::stoull(s));
  }
  return out;
}

}  // namespace

DataBundle load_data(const Config& cfg) {
  Dataset full;
  if (cfg.has("data.cache")) {
    full = load_dataset_cache(cfg.require_str("data.cache"));
  } else if (cfg.has("data.csv")) {
    CsvSchema schema;
    schema.domain_col = cfg.require_str("data.domain_col");
    schema.label_cols = split_list(cfg.require_str("data.label_cols"));
    schema.feature_cols = split_list(cfg.require_str("data.feature_cols"));
    full = load_interactions(cfg.require_str("data.csv"), schema);
  } else {
    throw ValidationError("config needs data.cache or data.csv");
  }
  const uint64_t split_seed = cfg.get_u64("data.split_seed", 17);
  auto splits = split_dataset(full, split_ratios(cfg), split_seed);
  return {std::move(splits[0]), std::move(splits[1]), std::move(splits[2])};
}

TrainConfig train_config_from(const Config& cfg, uint64_t seed) {
  TrainConfig tc;
  tc.variant = variant_from_name(cfg.get_str("model.variant", "full"));
  tc.hyper.embedding_dim = static_cast<uint32_t>(cfg.get_u64("model.embedding_dim", 16));
  tc.hyper.hidden_dim = static_cast<uint32_t>(cfg.get_u64("model.hidden_dim", 32));
  tc.hyper.expert_dim = static_cast<uint32_t>(cfg.get_u64("model.expert_dim", 16));
  tc.hyper.tower_hidden = static_cast<uint32_t>(cfg.get_u64("model.tower_hidden", 16));
  tc.hyper.shared_experts = static_cast<uint32_t>(cfg.get_u64("model.shared_experts", 2));
  tc.epochs = static_cast<uint32_t>(cfg.get_u64("train.epochs", 30));
  tc.batch_size = static_cast<uint32_t>(cfg.get_u64("train.batch_size", 256));
  tc.lr = static_cast<float>(cfg.get_double("train.lr", 1e-2));
  tc.fusion_lr = static_cast<float>(cfg.get_double("train.fusion_lr", -1.0));
  const std::string opt = cfg.get_str("train.optimizer", "adam");
  if (opt == "adam") {
    tc.optimizer = OptimizerKind::adam;
  } else if (opt == "sgd") {
    tc.optimizer = OptimizerKind::sgd;
  } else {
    throw ValidationError("train.optimizer must be adam or sgd, got '" + opt + "'");
  }
  tc.seed = seed;
  tc.patience = static_cast<uint32_t>(cfg.get_u64("train.patience", 3));
  return tc;
}

SyntheticSpec synth_spec_from(const Config& cfg, std::optional<uint64_t> seed_override) {
  SyntheticSpec spec;
  spec.domain_count = static_cast<uint32_t>(cfg.get_u64("synth.domains", 3));
  spec.task_count = static_cast<uint32_t>(cfg.get_u64("synth.tasks", 2));
  for (const auto& field : split_list(cfg.get_str("synth.fields", "user:400,item:200"))) {
    const size_t colon = field.find(':');
    if (colon == std::string::npos) {
      throw ValidationError("synth.fields entries must look like name:vocab");
    }
    FieldDesc fd;
    fd.name = field.substr(0, colon);
    fd.vocab = static_cast<uint32_t>(std::stoul(field.substr(colon + 1)));
    spec.fields.push_back(std::move(fd));
  }
  for (const auto& c : split_list(cfg.get_str("synth.samples_per_domain", "700,8900,400"))) {
    spec.samples_per_domain.push_back(std::stoull(c));
  }
  spec.latent_dim = static_cast<uint32_t>(cfg.get_u64("synth.latent_dim", 8));
  spec.rho_domain = cfg.get_double("synth.rho_domain", 0.8);
  spec.rho_task = cfg.get_double("synth.rho_task", 0.8);
  spec.noise = cfg.get_double("synth.noise", 0.1);
  spec.seed = seed_override.value_or(cfg.get_u64("synth.seed", 1));
  return spec;
}

std::string run_dir(const std::string& out_dir, const Config& cfg, uint64_t seed) {
  fs::path dir = fs::path(out_dir) / (cfg.hash() + "-s" + std::to_string(seed));
  fs::create_directories(dir);
  return dir.string();
}

int cmd_train(const CommonArgs& args) {
  const Config cfg = load_config(args);
  const uint64_t seed = seed_of(args, cfg);
  const std::string dir = run_dir(args.out_dir, cfg, seed);

  DataBundle data = load_data(cfg);
  TrainConfig tc = train_config_from(cfg, seed);
  FitResult fr = fit(tc, data.train, data.valid);

  save_checkpoint_file(fr.best, dir + "/checkpoint.mdmtck");
  write_text_file(dir + "/history.txt", render_history(fr.history));

  Model<float> best = model_from_checkpoint(fr.best);
  EvalReport test_report = evaluate(best, data.test);
  write_text_file(dir + "/report_test.txt", render_report(test_report));

  std::cout << "run_dir=" << dir << "\n";
  std::cout << "best_epoch=" << fr.history.best_epoch
            << " best_val_auc=" << format_double(fr.history.best_val_auc) << "\n";
  std::cout << render_report(test_report);
  return 0;
}

int cmd_eval(const CommonArgs& args) {
  if (args.checkpoint_path.empty()) {
    throw ValidationError("eval needs --checkpoint PATH");
  }
  const Config cfg = load_config(args);
  const uint64_t seed = seed_of(args, cfg);
  const Checkpoint ck = load_checkpoint_file(args.checkpoint_path);
  Model<float> model = model_from_checkpoint(ck);

  DataBundle data = load_data(cfg);
  const std::string split = cfg.get_str("eval.split", "test");
  const Dataset* ds = nullptr;
  if (split == "train") {
    ds = &data.train;
  } else if (split == "valid") {
    ds = &data.valid;
  } else if (split == "test") {
    ds = &data.test;
  } else {
    throw ValidationError("eval.split must be train, valid or test");
  }

  const FeatureSpace& model_space =
      std::visit([](auto& m) -> const FeatureSpace& { return m.space; }, model);
  if (!(model_space == ds->space)) {
    std::ostringstream msg;
    msg << "checkpoint/dataset mismatch: checkpoint expects D=" << model_space.domain_count
        << " T=" << model_space.task_count << " fields=" << model_space.field_count()
        << ", dataset has D=" << ds->space.domain_count << " T=" << ds->space.task_count
        << " fields=" << ds->space.field_count();
    throw ValidationError(msg.str());
  }

  EvalReport report = evaluate(model, *ds);
  const std::string dir = run_dir(args.out_dir, cfg, seed);
  write_text_file(dir + "/report_" + split + ".txt", render_report(report));
  std::cout << render_report(report);
  return 0;
}

int cmd_ablate(const CommonArgs& args) {
  const Config cfg = load_config(args);
  const uint64_t base_seed = seed_of(args, cfg);
  const std::string dir = run_dir(args.out_dir, cfg, base_seed);
  const auto seeds = seeds_of(args, cfg);
  const auto variants = split_list(cfg.get_str("ablate.variants", "full,no_automl"));

  DataBundle data = load_data(cfg);
  std::ostringstream table;
  for (const auto& vname : variants) {
    TrainConfig tc = train_config_from(cfg, base_seed);
    tc.variant = variant_from_name(vname);
    SeedSweepResult sweep = seed_sweep(tc, data.train, data.valid, data.test, seeds);
    for (const auto& run : sweep.runs) {
      table << "variant=" << vname << " seed=" << run.seed;
      if (run.ok) {
        table << " overall_auc=" << format_double(run.report.overall_auc)
              << " overall_logloss=" << format_double(run.report.overall_logloss);
      } else {
        table << " status=failed msg=\"" << run.error << "\"";
      }
      table << "\n";
    }
    const auto aucs = sweep.overall_aucs();
    if (!aucs.empty()) {
      table << "variant=" << vname << " seeds_ok=" << aucs.size()
            << " mean_auc=" << format_double(mean_of(aucs))
            << " std_auc=" << format_double(sample_std(aucs)) << "\n";
    }
  }
  write_text_file(dir + "/ablate_table.txt", table.str());
  std::cout << table.str();
  return 0;
}

int cmd_synth(const CommonArgs& args) {
  const Config cfg = load_config(args);
  SyntheticSpec spec = synth_spec_from(cfg, args.seed);
  Dataset ds = generate_synthetic(spec);

  fs::path out = args.out_dir;
  std::string path;
  if (out.has_extension()) {
    fs::create_directories(out.parent_path().empty() ? "." : out.parent_path());
    path = out.string();
  } else {
    fs::create_directories(out);
    path = (out / "synthetic.mdmtds").string();
  }
  save_dataset_cache(ds, path);

  auto by_domain = rows_by_domain(ds);
  std::cout << "cache=" << path << " samples=" << ds.size() << "\n";
  for (uint32_t d = 0; d < ds.space.domain_count; ++d) {
    const double pct = 100.0 * static_cast<double>(by_domain[d].size()) /
                       static_cast<double>(ds.size());
    std::cout << "domain=" << d << " count=" << by_domain[d].size()
              << " pct=" << format_double(pct, 2);
    for (uint32_t t = 0; t < ds.space.task_count; ++t) {
      size_t pos = 0;
      for (uint32_t row : by_domain[d]) pos += ds.label_row(row)[t];
      const double rate = by_domain[d].empty()
                              ? 0.0
                              : static_cast<double>(pos) / static_cast<double>(by_domain[d].size());
      std::cout << " rate_task" << t << "=" << format_double(rate, 4);
    }
    std::cout << "\n";
  }
  return 0;
}

int cmd_gradcheck(const CommonArgs& args) {
  const Config cfg = load_config(args);
  const uint64_t seed = seed_of(args, cfg);
  const auto results = run_all_gradchecks(seed);
  std::cout << render_gradcheck_report(results);
  if (!gradchecks_pass(results)) {
    for (const auto& r : results) {
      if (!r.pass) std::cerr << "gradcheck failed for family '" << r.family << "'\n";
    }
    return 1;
  }
  return 0;
}

int cmd_export_embeddings(const CommonArgs& args) {
  if (args.checkpoint_path.empty()) {
    throw ValidationError("export-embeddings needs --checkpoint PATH");
  }
  const Config cfg = load_config(args);
  const uint64_t seed = seed_of(args, cfg);
  const Checkpoint ck = load_checkpoint_file(args.checkpoint_path);
  Model<float> model = model_from_checkpoint(ck);
  auto* core = std::get_if<M3oECore<float>>(&model);
  if (core == nullptr) {
    throw ValidationError("export-embeddings needs an expert-based model, not mlp_single");
  }

  DataBundle data = load_data(cfg);
  const std::string split = cfg.get_str("export.split", "test");
  const Dataset& ds = split == "train" ? data.train : (split == "valid" ? data.valid : data.test);
  const ExportStage stage = export_stage_from_name(cfg.get_str("export.stage", "fused"));
  const auto task = static_cast<uint32_t>(cfg.get_u64("export.task", 0));
  const size_t limit = cfg.get_u64("export.limit", ds.size());

  const std::string dir = run_dir(args.out_dir, cfg, seed);
  const std::string path = dir + "/embeddings_" + export_stage_name(stage) + ".tsv";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write file: " + path);

  const uint32_t T = ds.space.task_count;
  Eigen::Index K = 0;
  std::ostringstream body;
  size_t written = 0;
  auto by_domain = rows_by_domain(ds);
  for (uint32_t d = 0; d < ds.space.domain_count && written < limit; ++d) {
    if (by_domain[d].empty()) continue;
    const size_t take = std::min(by_domain[d].size(), limit - written);
    std::span<const uint32_t> rows(by_domain[d].data(), take);
    MatrixX<float> emb =
        stage_embeddings(*core, ds, rows, static_cast<uint16_t>(d), stage, task);
    K = emb.cols();
    for (size_t i = 0; i < take; ++i) {
      for (Eigen::Index k = 0; k < emb.cols(); ++k) {
        body << format_double(static_cast<double>(emb(static_cast<Eigen::Index>(i), k)), 6)
             << "\t";
      }
      body << d << "\t" << task;
      for (uint32_t t = 0; t < T; ++t) {
        body << "\t" << static_cast<int>(ds.label_row(rows[i])[t]);
      }
      body << "\n";
    }
    written += take;
  }
  for (Eigen::Index k = 0; k < K; ++k) out << "dim" << k << "\t";
  out << "domain\ttask";
  for (uint32_t t = 0; t < T; ++t) out << "\tlabel_" << t;
  out << "\n" << body.str();
  std::cout << "exported=" << written << " file=" << path << "\n";
  return 0;
}

}  // namespace mdmt::cli

#include <CLI11.hpp>
#include <iostream>

#include "mdmt/cli_commands.hpp"
#include "mdmt/errors.hpp"

namespace {

void add_common(CLI::App* cmd, mdmt::cli::CommonArgs& args, bool with_checkpoint = false) {
  cmd->add_option("--config", args.config_path, "config file (flat key=value)");
  cmd->add_option("--set", args.overrides, "override, key=value (repeatable)");
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--seed", args.seed, "seed override");
  cmd->add_option("--seeds", args.seeds, "seed list for sweeps")->delimiter(',');
  if (with_checkpoint) {
    cmd->add_option("--checkpoint", args.checkpoint_path, "checkpoint file");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-domain multi-task mixture-of-experts recommender"};
  app.require_subcommand(1);

  mdmt::cli::CommonArgs args;
  std::string command;

  auto* train = app.add_subcommand("train", "train a model and write checkpoint/history/report");
  add_common(train, args);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  add_common(eval, args, true);
  auto* ablate = app.add_subcommand("ablate", "train variants over seeds and tabulate AUC");
  add_common(ablate, args);
  auto* synth = app.add_subcommand("synth", "generate a planted-factor synthetic dataset cache");
  add_common(synth, args);
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks for all gradients");
  add_common(gradcheck, args);
  auto* exp = app.add_subcommand("export-embeddings", "dump stage embeddings to TSV");
  add_common(exp, args, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return 0;  // --help
    std::cerr << "error code=1 command=parse msg=\"" << e.what() << "\"\n";
    return 1;
  }

  int (*fn)(const mdmt::cli::CommonArgs&) = nullptr;
  if (train->parsed()) {
    command = "train";
    fn = mdmt::cli::cmd_train;
  } else if (eval->parsed()) {
    command = "eval";
    fn = mdmt::cli::cmd_eval;
  } else if (ablate->parsed()) {
    command = "ablate";
    fn = mdmt::cli::cmd_ablate;
  } else if (synth->parsed()) {
    command = "synth";
    fn = mdmt::cli::cmd_synth;
  } else if (gradcheck->parsed()) {
    command = "gradcheck";
    fn = mdmt::cli::cmd_gradcheck;
  } else if (exp->parsed()) {
    command = "export-embeddings";
    fn = mdmt::cli::cmd_export_embeddings;
  }

  try {
    return fn(args);
  } catch (const mdmt::NumericError& e) {
    std::cerr << "error code=2 command=" << command << " msg=\"" << e.what() << "\"\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error code=1 command=" << command << " msg=\"" << e.what() << "\"\n";
    return 1;
  }
}

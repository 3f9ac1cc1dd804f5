#include "headlab/harness.hpp"
#include "headlab/version.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <optional>
#include <string>

int main(int argc, char** argv) {
  CLI::App app{"detection-head laboratory: synthetic benchmark, training "
               "harness and evaluation suite"};
  app.set_version_flag("--version", headlab::kVersion);
  app.require_subcommand(1);

  std::string config_path, out_path, out_dir, checkpoint_path, data_path,
      report_path, suite;
  int seeds = 5;

  auto* synth = app.add_subcommand("synth", "generate a dataset file");
  synth->add_option("--config", config_path, "experiment config (JSON)")
      ->required();
  synth->add_option("--out", out_path, "output dataset path")->required();

  auto* train = app.add_subcommand("train", "train a model end to end");
  train->add_option("--config", config_path, "experiment config (JSON)")
      ->required();
  train->add_option("--out", out_dir, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")
      ->required();
  eval->add_option("--data", data_path, "dataset file")->required();
  eval->add_option("--report", report_path, "output CSV path")->required();

  auto* ablate = app.add_subcommand(
      "ablate", "run an architecture comparison suite over several seeds");
  ablate
      ->add_option("--suite", suite,
                   "model-design | branch | decouple | sequence")
      ->required();
  ablate->add_option("--out", out_dir, "output directory")->required();
  std::string ablate_config;
  ablate->add_option("--config", ablate_config,
                     "base experiment config (JSON); defaults apply otherwise");
  ablate->add_option("--seeds", seeds, "seeds per row (default 5)");

  auto* stats = app.add_subcommand(
      "stats", "offset-residual distributions before and after the first step");
  stats->add_option("--checkpoint", checkpoint_path, "checkpoint file")
      ->required();
  stats->add_option("--data", data_path, "dataset file")->required();
  stats->add_option("--out", report_path, "output CSV path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      headlab::command_synth(config_path, out_path);
    } else if (train->parsed()) {
      headlab::command_train(config_path, out_dir);
    } else if (eval->parsed()) {
      headlab::command_eval(checkpoint_path, data_path, report_path);
    } else if (ablate->parsed()) {
      headlab::command_ablate(
          suite, out_dir,
          ablate_config.empty() ? std::nullopt
                                : std::optional<std::string>(ablate_config),
          seeds);
    } else if (stats->parsed()) {
      headlab::command_stats(checkpoint_path, data_path, report_path);
    }
  } catch (const std::exception& e) {
    // machine-readable single-line error
    std::string msg = e.what();
    for (char& c : msg)
      if (c == '"') c = '\'';
    std::fprintf(stderr, "{\"error\": \"%s\"}\n", msg.c_str());
    return 1;
  }
  return 0;
}

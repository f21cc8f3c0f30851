// eln-lab: command-line entry point for data generation, training,
// evaluation, ablations and plots.

#include <cstdio>
#include <exception>

#include <CLI11.hpp>

#include "eln/experiment.hpp"

namespace {

constexpr int kExitSubRunFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitPrerequisite = 3;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ELN semi-supervised segmentation lab"};
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool freeze_eln = false;
  std::optional<double> threshold;
  std::optional<std::string> checkpoint;
  app.add_option("command", command, "gen-data | pretrain | stage1 | stage2 | train | eval | ablate | plot")
      ->required()
      ->check(CLI::IsMember({"gen-data", "pretrain", "stage1", "stage2", "train", "eval", "ablate", "plot"}));
  app.add_option("--config", config_path, "JSON config file")->required();
  app.add_option("--seed", seed, "run this seed only");
  app.add_option("--out", out, "output directory");
  app.add_flag("--freeze-eln", freeze_eln, "stop ELN updates during stage 2");
  app.add_option("--threshold", threshold, "confidence threshold for the threshold mask and baseline");
  app.add_option("--checkpoint", checkpoint, "checkpoint to evaluate (eval only)");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    auto cfg = eln::parse_config(config_path);
    if (seed) cfg.seeds = {*seed};
    if (out) cfg.output_dir = *out;
    if (freeze_eln) cfg.train.freeze_eln = true;
    if (threshold) cfg.train.threshold = *threshold;
    cfg.validate();
    eln::CommandOptions opts;
    if (checkpoint) opts.checkpoint = *checkpoint;
    const int rc = eln::run_command(eln::command_from_string(command), cfg, opts);
    return rc == 0 ? 0 : kExitSubRunFailed;
  } catch (const eln::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const eln::PrerequisiteError& e) {
    std::fprintf(stderr, "missing prerequisite: %s\n", e.what());
    return kExitPrerequisite;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitSubRunFailed;
  }
}

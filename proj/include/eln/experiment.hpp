// Experiment configuration, run directories and the commands behind the
// eln-lab entry point (gen-data, pretrain, stage1, stage2, train, eval,
// ablate, plot).

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eln/datagen.hpp"
#include "eln/training.hpp"

namespace eln {

// A command was run before the artifacts it depends on exist.
class PrerequisiteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  // Folder dataset (images/ + labels/); synthetic scenes when absent.
  std::optional<std::filesystem::path> path;
  std::optional<std::filesystem::path> validation_path;
  SyntheticSceneSpec synthetic;
  std::int64_t count = 256;
  std::int64_t validation_count = 64;
};

struct AblationVariant {
  std::string name;
  nlohmann::json overrides = nlohmann::json::object();  // merged onto the training config
};

struct ExperimentConfig {
  DatasetConfig dataset;
  double split_ratio = 0.125;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  TrainConfig train;  // train.seed is replaced per run
  std::vector<double> thresholds{0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95};
  std::vector<AblationVariant> variants;
  int eval_batch_size = 8;
  std::filesystem::path output_dir = "runs/default";

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& cfg);

// Named variants for the ablation grids: mask source (eln, secn, threshold,
// unmasked), decoder count (K0..K3) and loss subsets (pseudo_only,
// contra_only, both, threshold_only).
AblationVariant named_variant(const std::string& name);
std::vector<AblationVariant> default_variants();

// Unknown keys and ill-typed values raise ConfigError naming the key. An
// empty object (or empty file) yields the defaults.
ExperimentConfig parse_config_json(const nlohmann::json& j);
ExperimentConfig parse_config(const std::filesystem::path& path);

// Applies a variant's overrides to the training config.
TrainConfig apply_overrides(const TrainConfig& base, const nlohmann::json& overrides);

struct ExperimentData {
  DatasetSplit split;
  std::vector<Sample> validation;
};

ExperimentData load_experiment_data(const ExperimentConfig& cfg, std::uint64_t seed);

// Hex digest of the source files the binary was built from.
std::string code_hash();
// FNV-1a over the compact JSON dump.
std::string config_hash(const nlohmann::json& j);

std::filesystem::path seed_dir(const ExperimentConfig& cfg, std::uint64_t seed);

// Keeps only records at or before (stage, iteration), so that a resumed run
// appends exactly where its checkpoint left off.
void truncate_metric_log(const std::filesystem::path& path, Stage stage, std::int64_t iteration);

struct RunOptions {
  std::optional<Stage> stop_after;  // pretrain / stage1 commands
  bool evaluate = true;             // write eval.json when stage 2 completes
};

// Trains one seed in `run_dir`, resuming from the most advanced checkpoint
// that is not past `stop_after`. Stage commands require the previous stage's
// checkpoint and raise PrerequisiteError otherwise.
TrainingResult train_run(const ExperimentConfig& cfg, const TrainConfig& train, const ExperimentData& data,
                         const std::filesystem::path& run_dir, const RunOptions& opts);

// Evaluates a checkpoint: validation mIoU plus localization P/R/F1 of the
// ELN, the s-ECN (when present) and the threshold sweep on the unlabeled
// partition. Identical inputs give byte-identical JSON.
nlohmann::json evaluate_checkpoint(const ExperimentConfig& cfg, const ExperimentData& data,
                                   const std::filesystem::path& checkpoint, std::uint64_t seed);

struct AblationSummaryRow {
  std::string variant;
  std::int64_t runs = 0;
  std::int64_t failed = 0;
  double miou_mean = 0.0;
  double miou_std = 0.0;
  double eln_f1_mean = 0.0;
  double eln_f1_std = 0.0;
  double threshold_f1_mean = 0.0;
  double threshold_f1_std = 0.0;
};

// Sample mean and standard deviation (n - 1 denominator, 0 for n < 2).
std::pair<double, double> mean_std(const std::vector<double>& v);

void write_summary_csv(const std::filesystem::path& path, const std::vector<AblationSummaryRow>& rows);

enum class Command { gen_data, pretrain, stage1, stage2, train, eval, ablate, plot };
Command command_from_string(const std::string& s);
std::string to_string(Command c);

struct CommandOptions {
  std::optional<std::filesystem::path> checkpoint;  // eval only
};

// Returns the process exit status: 0 on success, 1 if any ablation sub-run
// failed. Errors propagate as exceptions.
int run_command(Command command, const ExperimentConfig& cfg, const CommandOptions& opts = {});

// Writes loss curves and metric bars found under the output directory to
// <out>/plots/*.png; returns the files written.
std::vector<std::filesystem::path> render_plots(const ExperimentConfig& cfg);

}  // namespace eln

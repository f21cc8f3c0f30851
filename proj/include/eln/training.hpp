// Stage 1 (supervised pretraining, then joint training of the main network,
// constrained auxiliary decoders and the ELN) and stage 2 (mean-teacher
// semi-supervised training with ELN-masked pseudo labels).

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eln/checkpoint.hpp"
#include "eln/datagen.hpp"
#include "eln/losses.hpp"
#include "eln/metrics.hpp"
#include "eln/networks.hpp"

namespace eln {

// An operation was called in the wrong stage or without its prerequisites.
class StageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct OptimConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int labeled_batch = 4;
  int unlabeled_batch = 4;

  void validate() const;
};

void to_json(nlohmann::json& j, const OptimConfig& cfg);
void from_json(const nlohmann::json& j, OptimConfig& cfg);

// Adam with decoupled weight decay. Moments are keyed by
// "<group>/<parameter name>".
class AdamW {
 public:
  explicit AdamW(OptimConfig cfg) : cfg_(cfg) {}

  // Parameters without a gradient are skipped; bias correction uses each
  // parameter's own update count.
  void step(const std::string& group, ParameterSet& params);
  // Updates applied to "<group>/<name>" so far.
  std::int64_t steps(const std::string& key) const;

  void save(CheckpointData& ckpt) const;
  void load(const CheckpointData& ckpt);

 private:
  struct Moments {
    std::vector<float> m;
    std::vector<float> v;
    std::int64_t t = 0;
  };
  OptimConfig cfg_;
  std::map<std::string, Moments> moments_;
};

// teacher = beta * teacher + (1 - beta) * student, elementwise, no gradient.
void ema_update(ParameterSet& teacher, const ParameterSet& student, double beta);

struct EMAState {
  double beta = 0.995;
  std::int64_t step = 0;

  void validate() const;
};

enum class Stage { pretrain, stage1, stage2 };
std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

// Which validity mask filters pseudo labels in stage 2.
enum class MaskSource { eln, secn, threshold, none };
std::string to_string(MaskSource m);
MaskSource mask_source_from_string(const std::string& s);

struct TrainConfig {
  SegModelConfig model;
  ElnConfig eln;
  OptimConfig optim;
  AugmentationConfig augmentation;
  ContrastiveConfig contrastive;
  std::vector<double> alphas{20.0, 50.0};
  double ema_beta = 0.995;
  bool freeze_eln = false;   // stop ELN updates during stage 2
  bool train_secn = false;   // train the s-ECN baseline alongside the ELN
  MaskSource mask = MaskSource::eln;
  double threshold = 0.7;    // used when mask == threshold
  bool use_pseudo = true;
  bool use_contra = true;
  std::int64_t pretrain_steps = 500;
  std::int64_t stage1_steps = 2000;
  std::int64_t stage2_steps = 2000;
  std::int64_t eval_every = 0;        // 0: evaluate only at stage ends
  std::int64_t checkpoint_every = 0;  // 0: checkpoints only at stage ends
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

class TrainState {
 public:
  explicit TrainState(const TrainConfig& cfg);
  TrainState(const TrainState&) = delete;
  TrainState& operator=(const TrainState&) = delete;

  const TrainConfig& config() const { return cfg_; }
  Stage stage = Stage::pretrain;
  std::int64_t iteration = 0;  // steps completed in the current stage

  SegNet student;
  AuxDecoders aux;
  LocalizerModel eln;
  std::optional<LocalizerModel> secn;
  std::optional<SegNet> teacher;
  AdamW optimizer;
  EMAState ema;

  // Copies the student into a fresh teacher and switches to stage 2.
  void begin_stage2();
  void enter(Stage s);

  CheckpointData to_checkpoint() const;
  // Restores parameters, optimizer state and counters. Throws ConfigError
  // if the checkpoint was written under a different model configuration.
  void restore(const CheckpointData& ckpt);

 private:
  TrainConfig cfg_;
};

struct Stage1Diagnostics {
  double sup = 0.0;
  double aux = 0.0;
  double eln = 0.0;
  double secn = 0.0;
  double total = 0.0;
  double main_ce = 0.0;
  std::vector<double> aux_ce;  // mean per auxiliary decoder
  double gate_fraction = 0.0;
  std::int64_t bce_fallbacks = 0;
};

struct Stage2Diagnostics {
  Stage1Diagnostics labeled;
  double pseudo = 0.0;
  double contra = 0.0;
  double total = 0.0;
  double valid_fraction = 0.0;
  std::int64_t contrastive_anchors = 0;
};

// One optimizer step on L_sup for encoder + main decoder.
double pretrain_step(TrainState& state, const Batch& labeled);
// Runs `steps` pretraining steps sampling from D_L.
void pretrain_main(TrainState& state, std::span<const Sample> labeled, std::int64_t steps);

// Builds L_labeled for a batch; the caller owns backward and the update.
struct LabeledObjective {
  Tensor total;
  Stage1Diagnostics diagnostics;
};
LabeledObjective labeled_objective(const TrainState& state, const Batch& labeled, bool with_eln = true);

// Backward + AdamW on L_labeled (student, aux decoders, ELN, s-ECN).
Stage1Diagnostics train_labeled_step(TrainState& state, const Batch& labeled);
Stage1Diagnostics stage1_step(TrainState& state, const Batch& labeled);

struct UnlabeledBatch {
  Tensor clean;      // teacher / ELN input (shared flip only)
  Tensor perturbed;  // student input (shared flip + photometric)
};

// When mask_override is set it replaces the configured validity mask.
Stage2Diagnostics stage2_step(TrainState& state, const Batch& labeled, const UnlabeledBatch& unlabeled,
                              const BinaryMap* mask_override = nullptr);

// Stage-2 validity mask for teacher predictions on `clean` images.
BinaryMap stage2_mask(const TrainState& state, const Tensor& clean_images, const Tensor& teacher_probs);

// Batch streams. Each stage draws from its own stream so that sample order
// depends only on (seed, stream, iteration).
inline constexpr std::uint64_t kPretrainStream = 1;
inline constexpr std::uint64_t kStage1Stream = 2;
inline constexpr std::uint64_t kStage2LabeledStream = 3;
inline constexpr std::uint64_t kStage2UnlabeledStream = 4;

// Deterministic sample order: epoch e of stream s is a shuffle seeded by
// (seed, s, e); positions advance by batch size each iteration.
std::vector<std::size_t> batch_indices(std::uint64_t seed, std::uint64_t stream, std::int64_t iteration,
                                       std::size_t batch_size, std::size_t dataset_size);

Batch sample_labeled_batch(const TrainConfig& cfg, std::span<const Sample> labeled, std::uint64_t stream,
                           std::int64_t iteration);
UnlabeledBatch sample_unlabeled_batch(const TrainConfig& cfg, std::span<const Sample> unlabeled,
                                      std::int64_t iteration);

class MetricLog {
 public:
  MetricLog() = default;
  explicit MetricLog(const std::filesystem::path& path, bool append = false);
  void write(const nlohmann::json& record);
  const std::vector<nlohmann::json>& records() const { return records_; }

 private:
  std::optional<std::ofstream> out_;
  std::vector<nlohmann::json> records_;
};

struct RunPaths {
  std::filesystem::path checkpoints;  // directory for *.ckpt
};

struct TrainingData {
  std::span<const Sample> labeled;
  std::span<const Sample> unlabeled;
  std::span<const Sample> validation;  // labeled, used for mIoU
};

struct TrainingResult {
  SegmentationReport final_eval;
  std::filesystem::path student_checkpoint;
};

// Runs every stage from the state's current position to the end of stage 2.
// Checkpoints: pretrain.ckpt, stage1.ckpt, stage2.ckpt (full state) and
// student.ckpt (student only), plus last.ckpt every checkpoint_every steps.
TrainingResult run_training(TrainState& state, const TrainingData& data, const RunPaths& paths, MetricLog& log,
                            std::optional<Stage> stop_after = std::nullopt);

nlohmann::json stage1_record(const Stage1Diagnostics& d);
nlohmann::json stage2_record(const Stage2Diagnostics& d);

}  // namespace eln

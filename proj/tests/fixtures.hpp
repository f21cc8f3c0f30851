// Small configurations and datasets that keep training tests fast.

#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "eln/experiment.hpp"
#include "eln/training.hpp"

namespace fixture {

inline eln::TrainConfig tiny_train_config(std::uint64_t seed = 0) {
  eln::TrainConfig cfg;
  cfg.model.num_classes = 3;
  cfg.model.encoder_channels = {8, 8, 16};
  cfg.model.decoder_channels = 8;
  cfg.model.low_level_channels = 8;
  cfg.model.embedding_dim = 8;
  cfg.model.num_aux_decoders = 2;
  cfg.eln.channels = {8, 8};
  cfg.optim.labeled_batch = 2;
  cfg.optim.unlabeled_batch = 2;
  cfg.optim.learning_rate = 1e-3;
  cfg.pretrain_steps = 3;
  cfg.stage1_steps = 3;
  cfg.stage2_steps = 3;
  cfg.seed = seed;
  return cfg;
}

inline eln::SyntheticSceneSpec tiny_scenes() {
  eln::SyntheticSceneSpec spec;
  spec.height = spec.width = 16;
  spec.num_classes = 3;
  return spec;
}

inline eln::ExperimentConfig tiny_experiment(const std::filesystem::path& out) {
  eln::ExperimentConfig cfg;
  cfg.train = tiny_train_config();
  cfg.dataset.synthetic = tiny_scenes();
  cfg.dataset.count = 16;
  cfg.dataset.validation_count = 4;
  cfg.split_ratio = 0.25;
  cfg.seeds = {0};
  cfg.eval_batch_size = 4;
  cfg.output_dir = out;
  return cfg;
}

inline std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("eln_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace fixture

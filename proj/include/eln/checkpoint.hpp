// Checkpoint file format.
//
//   bytes 0..7    magic "ELNCKPT1"
//   bytes 8..15   header length N, uint64 little-endian
//   next N bytes  UTF-8 JSON header:
//                 {"format": "eln-checkpoint", "version": 1,
//                  "stage": ..., "iteration": ..., "config": {...},
//                  "meta": {...},
//                  "tensors": [{"name", "shape", "offset", "count"}, ...]}
//   remainder     float32 little-endian payload; "offset" is in elements.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eln/networks.hpp"

namespace eln {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct CheckpointData {
  std::string stage;
  std::int64_t iteration = 0;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
  // Appends every parameter of `params` under "<prefix>/<name>".
  void add_parameters(const std::string& prefix, const ParameterSet& params);
  void add_array(const std::string& name, Shape shape, std::vector<float> values);
  // Loads "<prefix>/<name>" into every parameter; throws IoError on any
  // missing array or shape mismatch.
  void load_parameters(const std::string& prefix, ParameterSet& params) const;
  bool has_prefix(const std::string& prefix) const;
};

void save_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::filesystem::path& path);

}  // namespace eln

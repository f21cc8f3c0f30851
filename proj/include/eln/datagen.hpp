// Synthetic scenes, folder datasets, labeled/unlabeled splits and the
// augmentations used by both training stages.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eln/random.hpp"
#include "eln/tensor.hpp"

namespace eln {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// RGB image, planar [3, H, W], values in [0, 1].
struct ImageArray {
  int height = 0;
  int width = 0;
  std::vector<float> values;

  ImageArray() = default;
  ImageArray(int h, int w, float fill = 0.0F)
      : height(h), width(w), values(static_cast<std::size_t>(3 * h * w), fill) {}

  float& at(int c, int y, int x) { return values[static_cast<std::size_t>((c * height + y) * width + x)]; }
  float at(int c, int y, int x) const { return values[static_cast<std::size_t>((c * height + y) * width + x)]; }
  bool operator==(const ImageArray&) const = default;
};

// Per-pixel class indices [H, W].
struct LabelArray {
  int height = 0;
  int width = 0;
  std::vector<std::int32_t> values;

  LabelArray() = default;
  LabelArray(int h, int w, std::int32_t fill = 0)
      : height(h), width(w), values(static_cast<std::size_t>(h * w), fill) {}

  std::int32_t& at(int y, int x) { return values[static_cast<std::size_t>(y * width + x)]; }
  std::int32_t at(int y, int x) const { return values[static_cast<std::size_t>(y * width + x)]; }
  bool operator==(const LabelArray&) const = default;
};

struct Sample {
  std::string id;
  ImageArray image;
  std::optional<LabelArray> label;

  bool operator==(const Sample&) const = default;
};

enum class ShapeKind { rectangle, ellipse, triangle };

std::string to_string(ShapeKind kind);
ShapeKind shape_kind_from_string(const std::string& name);

struct SyntheticSceneSpec {
  int height = 64;
  int width = 64;
  int num_classes = 4;  // includes background class 0
  int min_shapes = 1;
  int max_shapes = 4;
  std::vector<ShapeKind> shape_kinds{ShapeKind::rectangle, ShapeKind::ellipse, ShapeKind::triangle};
  double texture_noise_std = 0.1;
  double color_jitter = 0.25;      // per-channel offset range around the class colour
  double min_extent = 0.08;        // half-extent range as a fraction of image size
  double max_extent = 0.25;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticSceneSpec& spec);
void from_json(const nlohmann::json& j, SyntheticSceneSpec& spec);

// Base RGB colour of a foreground class: hue (cls - 1) / (C - 1) on the
// colour wheel at saturation 0.75, value 0.85.
std::array<double, 3> class_color(int cls, int num_classes);

// Recipe, drawn from Rng(derive_seed({spec.seed, index})) in this order:
//   1. background colour: 3 draws uniform(0.3, 0.7), one per channel;
//   2. shape count: range(min_shapes, max_shapes);
//   3. per shape: kind = shape_kinds[below(n_kinds)], class = range(1, C-1),
//      colour[c] = class_color[c] + uniform(-color_jitter, color_jitter),
//      centre (uniform(0, H), uniform(0, W)), half extents
//      (uniform(min,max) * H, uniform(min,max) * W). Shapes are painted in
//      order; later shapes overwrite earlier ones. A pixel (y, x) is tested
//      at its centre (y + 0.5, x + 0.5). Triangles point up with apex
//      (cy - ry, cx) and base corners (cy + ry, cx -/+ rx);
//   4. texture noise: for c, y, x in row-major order add
//      texture_noise_std * normal(), then clamp to [0, 1].
Sample generate_scene(const SyntheticSceneSpec& spec, std::int64_t index);
std::vector<Sample> generate_dataset(const SyntheticSceneSpec& spec, std::int64_t count, std::int64_t first_index = 0);

// Unlabeled samples carry no label; their ground truth is kept apart and is
// reachable only through hidden_labels(), which evaluation code uses.
class DatasetSplit {
 public:
  DatasetSplit() = default;
  DatasetSplit(std::vector<Sample> labeled, std::vector<Sample> unlabeled, std::vector<LabelArray> hidden,
               std::vector<std::size_t> labeled_indices, double ratio, std::uint64_t seed);

  const std::vector<Sample>& labeled() const { return labeled_; }
  const std::vector<Sample>& unlabeled() const { return unlabeled_; }
  const std::vector<LabelArray>& hidden_labels() const { return hidden_; }
  const std::vector<std::size_t>& labeled_indices() const { return labeled_indices_; }
  double ratio() const { return ratio_; }
  std::uint64_t seed() const { return seed_; }

 private:
  std::vector<Sample> labeled_;
  std::vector<Sample> unlabeled_;
  std::vector<LabelArray> hidden_;
  std::vector<std::size_t> labeled_indices_;
  double ratio_ = 0.0;
  std::uint64_t seed_ = 0;
};

// round(ratio * N) samples, chosen by a seeded shuffle, become labeled; both
// partitions keep the input order.
DatasetSplit make_splits(std::span<const Sample> samples, double ratio, std::uint64_t seed);

struct AugmentationConfig {
  double flip_probability = 0.5;
  double photometric_probability = 0.2;
  double grayscale_probability = 0.2;
  double brightness = 0.2;  // additive delta range
  double contrast = 0.4;    // factor range 1 +/- contrast
  double saturation = 0.4;  // factor range 1 +/- saturation

  void validate() const;
};

void to_json(nlohmann::json& j, const AugmentationConfig& cfg);
void from_json(const nlohmann::json& j, AugmentationConfig& cfg);

Sample flip_horizontal(const Sample& sample);

// Flips image and label together with probability flip_probability.
Sample augment_shared(const Sample& sample, const AugmentationConfig& cfg, Rng& rng);

struct ColorJitter {
  double brightness = 0.0;  // added to every channel
  double contrast = 1.0;    // scales around the image mean luminance
  double saturation = 1.0;  // blends with the per-pixel grayscale value
};

ImageArray apply_color_jitter(const ImageArray& image, const ColorJitter& jitter);
ImageArray to_grayscale(const ImageArray& image);
// Colour jitter with photometric_probability, then grayscale with
// grayscale_probability. Output is clamped to [0, 1].
ImageArray perturb_photometric(const ImageArray& image, const AugmentationConfig& cfg, Rng& rng);

// images/<stem>.png (8-bit RGB) + labels/<stem>.png (8-bit single channel).
std::vector<Sample> load_folder_dataset(const std::filesystem::path& root, int num_classes);
void write_folder_dataset(const std::filesystem::path& root, std::span<const Sample> samples);

struct Batch {
  Tensor images;                     // [B, 3, H, W]
  std::vector<std::int32_t> labels;  // [B, H, W] flattened; empty for unlabeled batches
  std::int64_t size = 0;
  int height = 0;
  int width = 0;

  bool has_labels() const { return !labels.empty(); }
};

Batch make_batch(std::span<const Sample> samples, bool with_labels);
Batch make_image_batch(std::span<const ImageArray> images);

}  // namespace eln

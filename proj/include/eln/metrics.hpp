// Segmentation and error-localization metrics, and the two comparison
// maskers (confidence threshold, s-ECN argmax agreement).

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "eln/datagen.hpp"
#include "eln/losses.hpp"
#include "eln/networks.hpp"

namespace eln {

// counts[y * C + p]: rows are ground truth, columns prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  int num_classes() const { return num_classes_; }
  std::int64_t at(int truth, int pred) const {
    return counts_[static_cast<std::size_t>(truth * num_classes_ + pred)];
  }
  std::int64_t& at(int truth, int pred) { return counts_[static_cast<std::size_t>(truth * num_classes_ + pred)]; }
  std::int64_t total() const;
  const std::vector<std::int64_t>& counts() const { return counts_; }

 private:
  int num_classes_;
  std::vector<std::int64_t> counts_;
};

void accumulate_confusion(ConfusionMatrix& cm, std::span<const std::int32_t> pred, std::span<const std::int32_t> truth);

// IoU per class; NaN where TP + FP + FN = 0.
std::vector<double> per_class_iou(const ConfusionMatrix& cm);
// Mean IoU over classes with a non-zero denominator.
double miou(const ConfusionMatrix& cm);

struct LocalizationReport {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::int64_t images = 0;
  std::int64_t images_without_valid = 0;    // contributed 0 precision
  std::int64_t images_without_correct = 0;  // contributed 0 recall
};

void to_json(nlohmann::json& j, const LocalizationReport& r);

// Positive = pixel marked valid. Precision, recall and F1 are computed per
// image and then averaged over images.
LocalizationReport localization_metrics(const BinaryMap& predicted_valid, const CorrectnessMask& true_correct);

// 1 where the max class probability >= t.
BinaryMap threshold_mask(const Tensor& probs, double t);

// 1 where argmax(corrected) equals argmax(original).
BinaryMap secn_valid_mask(const Tensor& corrected_probs, const Tensor& original_probs);

struct SegmentationReport {
  double miou = 0.0;
  std::vector<double> class_iou;
  double pixel_accuracy = 0.0;
  std::int64_t pixels = 0;
};

void to_json(nlohmann::json& j, const SegmentationReport& r);

SegmentationReport evaluate_segmentation(const SegNet& model, std::span<const Sample> samples, int batch_size = 8);

struct LocalizerSet {
  const LocalizerNet* eln = nullptr;
  const LocalizerNet* secn = nullptr;
  std::vector<double> thresholds;
};

struct LocalizationComparison {
  std::optional<LocalizationReport> eln;
  std::optional<LocalizationReport> secn;
  std::vector<std::pair<double, LocalizationReport>> threshold;
  double base_accuracy = 0.0;  // fraction of correctly predicted pixels

  const LocalizationReport* best_threshold() const;
  double best_threshold_value() const;
};

void to_json(nlohmann::json& j, const LocalizationComparison& c);

// Predicts each image with `model`, derives the true correctness mask from
// `labels` and scores every available masker against it.
LocalizationComparison compare_localizers(const SegNet& model, std::span<const Sample> images,
                                          std::span<const LabelArray> labels, const LocalizerSet& maskers,
                                          int batch_size = 8);

}  // namespace eln

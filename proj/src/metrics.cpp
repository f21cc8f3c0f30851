#include "eln/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace eln {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : num_classes_(num_classes), counts_(static_cast<std::size_t>(num_classes * num_classes), 0) {
  if (num_classes < 1) throw ConfigError("confusion matrix needs at least one class");
}

std::int64_t ConfusionMatrix::total() const {
  std::int64_t s = 0;
  for (auto c : counts_) s += c;
  return s;
}

void accumulate_confusion(ConfusionMatrix& cm, std::span<const std::int32_t> pred, std::span<const std::int32_t> truth) {
  if (pred.size() != truth.size()) throw ShapeError("accumulate_confusion: prediction/truth size mismatch");
  const int c = cm.num_classes();
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= c || truth[i] < 0 || truth[i] >= c) {
      throw std::out_of_range("accumulate_confusion: class index out of range at pixel " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < pred.size(); ++i) ++cm.at(truth[i], pred[i]);
}

std::vector<double> per_class_iou(const ConfusionMatrix& cm) {
  const int n = cm.num_classes();
  std::vector<double> iou(static_cast<std::size_t>(n), std::numeric_limits<double>::quiet_NaN());
  for (int c = 0; c < n; ++c) {
    std::int64_t tp = cm.at(c, c), fp = 0, fn = 0;
    for (int o = 0; o < n; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const auto denom = tp + fp + fn;
    if (denom > 0) iou[static_cast<std::size_t>(c)] = static_cast<double>(tp) / static_cast<double>(denom);
  }
  return iou;
}

double miou(const ConfusionMatrix& cm) {
  if (cm.total() <= 0) throw std::domain_error("miou: empty confusion matrix");
  double s = 0.0;
  int n = 0;
  for (double v : per_class_iou(cm)) {
    if (std::isnan(v)) continue;
    s += v;
    ++n;
  }
  if (n == 0) throw std::domain_error("miou: every class is degenerate");
  return s / n;
}

void to_json(nlohmann::json& j, const LocalizationReport& r) {
  j = nlohmann::json{{"precision", r.precision},
                     {"recall", r.recall},
                     {"f1", r.f1},
                     {"images", r.images},
                     {"images_without_valid", r.images_without_valid},
                     {"images_without_correct", r.images_without_correct}};
}

LocalizationReport localization_metrics(const BinaryMap& predicted_valid, const CorrectnessMask& true_correct) {
  if (predicted_valid.batch != true_correct.batch || predicted_valid.height != true_correct.height ||
      predicted_valid.width != true_correct.width) {
    throw ShapeError("localization_metrics: mask shapes differ");
  }
  LocalizationReport r;
  const std::int64_t hw = predicted_valid.pixels_per_image();
  double sp = 0.0, sr = 0.0, sf = 0.0;
  for (std::int64_t b = 0; b < predicted_valid.batch; ++b) {
    std::int64_t valid = 0, correct = 0, both = 0;
    for (std::int64_t i = 0; i < hw; ++i) {
      const auto px = static_cast<std::size_t>(b * hw + i);
      const bool v = predicted_valid.values[px] != 0, c = true_correct.values[px] != 0;
      valid += v;
      correct += c;
      both += v && c;
    }
    double p = 0.0, rc = 0.0;
    if (valid > 0) {
      p = static_cast<double>(both) / static_cast<double>(valid);
    } else {
      ++r.images_without_valid;
    }
    if (correct > 0) {
      rc = static_cast<double>(both) / static_cast<double>(correct);
    } else {
      ++r.images_without_correct;
    }
    sp += p;
    sr += rc;
    sf += (p + rc) > 0.0 ? 2.0 * p * rc / (p + rc) : 0.0;
  }
  r.images = predicted_valid.batch;
  if (r.images > 0) {
    r.precision = sp / static_cast<double>(r.images);
    r.recall = sr / static_cast<double>(r.images);
    r.f1 = sf / static_cast<double>(r.images);
  }
  return r;
}

BinaryMap threshold_mask(const Tensor& probs, double t) {
  if (probs.rank() != 4) throw ShapeError("threshold_mask: expected [B, C, H, W]");
  const std::int64_t batch = probs.dim(0), classes = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  BinaryMap m = BinaryMap::filled(batch, probs.dim(2), probs.dim(3), 0);
  auto p = probs.data();
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t i = 0; i < hw; ++i) {
      float mx = 0.0F;
      for (std::int64_t c = 0; c < classes; ++c) mx = std::max(mx, p[static_cast<std::size_t>((b * classes + c) * hw + i)]);
      m.values[static_cast<std::size_t>(b * hw + i)] = static_cast<double>(mx) >= t ? 1 : 0;
    }
  }
  return m;
}

BinaryMap secn_valid_mask(const Tensor& corrected_probs, const Tensor& original_probs) {
  if (corrected_probs.shape() != original_probs.shape()) throw ShapeError("secn_valid_mask: shape mismatch");
  auto a = argmax_classes(corrected_probs);
  auto b = argmax_classes(original_probs);
  BinaryMap m = BinaryMap::filled(original_probs.dim(0), original_probs.dim(2), original_probs.dim(3), 0);
  for (std::size_t i = 0; i < a.size(); ++i) m.values[i] = a[i] == b[i] ? 1 : 0;
  return m;
}

void to_json(nlohmann::json& j, const SegmentationReport& r) {
  nlohmann::json iou = nlohmann::json::array();
  for (double v : r.class_iou) iou.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
  j = nlohmann::json{{"mIoU", r.miou}, {"per_class_iou", iou}, {"pixel_accuracy", r.pixel_accuracy}, {"pixels", r.pixels}};
}

SegmentationReport evaluate_segmentation(const SegNet& model, std::span<const Sample> samples, int batch_size) {
  NoGradGuard no_grad;
  ConfusionMatrix cm(model.config().num_classes);
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto n = std::min(samples.size() - start, static_cast<std::size_t>(batch_size));
    Batch batch = make_batch(samples.subspan(start, n), true);
    auto out = model.forward(batch.images, false);
    auto pred = argmax_classes(out.logits);  // argmax of logits equals argmax of softmax
    accumulate_confusion(cm, pred, batch.labels);
  }
  SegmentationReport r;
  r.class_iou = per_class_iou(cm);
  r.miou = miou(cm);
  r.pixels = cm.total();
  std::int64_t diag = 0;
  for (int c = 0; c < cm.num_classes(); ++c) diag += cm.at(c, c);
  r.pixel_accuracy = static_cast<double>(diag) / static_cast<double>(r.pixels);
  return r;
}

const LocalizationReport* LocalizationComparison::best_threshold() const {
  const LocalizationReport* best = nullptr;
  for (const auto& [t, rep] : threshold) {
    if (best == nullptr || rep.f1 > best->f1) best = &rep;
  }
  return best;
}

double LocalizationComparison::best_threshold_value() const {
  const auto* best = best_threshold();
  for (const auto& [t, rep] : threshold) {
    if (&rep == best) return t;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

void to_json(nlohmann::json& j, const LocalizationComparison& c) {
  j = nlohmann::json::object();
  if (c.eln) j["eln"] = *c.eln;
  if (c.secn) j["secn"] = *c.secn;
  nlohmann::json sweep = nlohmann::json::array();
  for (const auto& [t, rep] : c.threshold) {
    nlohmann::json e = rep;
    e["threshold"] = t;
    sweep.push_back(e);
  }
  j["threshold_sweep"] = sweep;
  if (const auto* best = c.best_threshold()) {
    j["threshold_best"] = *best;
    j["threshold_best"]["threshold"] = c.best_threshold_value();
  }
  j["base_accuracy"] = c.base_accuracy;
}

namespace {

void append(BinaryMap& dst, const BinaryMap& src) {
  if (dst.batch == 0) {
    dst = src;
    return;
  }
  dst.batch += src.batch;
  dst.values.insert(dst.values.end(), src.values.begin(), src.values.end());
}

}  // namespace

LocalizationComparison compare_localizers(const SegNet& model, std::span<const Sample> images,
                                          std::span<const LabelArray> labels, const LocalizerSet& maskers,
                                          int batch_size) {
  if (images.size() != labels.size()) throw ShapeError("compare_localizers: image/label count mismatch");
  NoGradGuard no_grad;
  BinaryMap correct, eln_mask, secn_mask;
  std::vector<BinaryMap> thr_masks(maskers.thresholds.size());
  for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto n = std::min(images.size() - start, static_cast<std::size_t>(batch_size));
    std::vector<Sample> chunk;
    for (std::size_t i = start; i < start + n; ++i) chunk.push_back(Sample{images[i].id, images[i].image, labels[i]});
    Batch batch = make_batch(chunk, true);
    auto out = model.forward(batch.images, false);
    auto se = softmax_and_entropy(out.logits);
    append(correct, correctness_mask(se.probs.probs, batch.labels));
    for (std::size_t t = 0; t < maskers.thresholds.size(); ++t) {
      append(thr_masks[t], threshold_mask(se.probs.probs, maskers.thresholds[t]));
    }
    if (maskers.eln != nullptr || maskers.secn != nullptr) {
      auto input = build_eln_input(batch.images, se.probs.probs, se.entropy);
      if (maskers.eln != nullptr) append(eln_mask, round_validity(eln_forward(*maskers.eln, input).values));
      if (maskers.secn != nullptr) {
        append(secn_mask, secn_valid_mask(secn_forward(*maskers.secn, input).probs, se.probs.probs));
      }
    }
  }
  LocalizationComparison c;
  if (correct.batch == 0) return c;
  c.base_accuracy = static_cast<double>(correct.count()) / static_cast<double>(correct.values.size());
  if (maskers.eln != nullptr) c.eln = localization_metrics(eln_mask, correct);
  if (maskers.secn != nullptr) c.secn = localization_metrics(secn_mask, correct);
  for (std::size_t t = 0; t < maskers.thresholds.size(); ++t) {
    c.threshold.emplace_back(maskers.thresholds[t], localization_metrics(thr_masks[t], correct));
  }
  return c;
}

}  // namespace eln

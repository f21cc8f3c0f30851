// Training objectives for both stages, plus pseudo-label and correctness
// mask construction.
//
// Pixel sums are realised as means: ce_loss averages over all pixels, the
// ELN cross-entropy averages over each image's pixels, and pseudo_loss
// averages over the valid pixels of the batch.

#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "eln/networks.hpp"
#include "eln/tensor.hpp"

namespace eln {

class LossError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// {0,1} per pixel, [B, H, W].
struct BinaryMap {
  std::int64_t batch = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::uint8_t> values;

  static BinaryMap filled(std::int64_t b, std::int64_t h, std::int64_t w, std::uint8_t v) {
    return {b, h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(b * h * w), v)};
  }
  std::int64_t count() const;
  std::int64_t pixels_per_image() const { return height * width; }
  bool operator==(const BinaryMap&) const = default;
};

// 1 where the argmax of a prediction equals the ground truth.
using CorrectnessMask = BinaryMap;

struct PseudoLabelMap {
  std::int64_t batch = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<std::int32_t> values;
};

// Argmax over classes, ties broken by the lowest class index.
std::vector<std::int32_t> argmax_classes(const Tensor& probs);

// sum_i w_i * (-log_probs[i, y_i]) / normalizer. Pixels with w_i == 0 get
// exactly zero gradient.
Tensor weighted_nll(const Tensor& log_probs, std::span<const std::int32_t> labels, std::span<const float> weights,
                    double normalizer);

// Mean over all pixels of -ln p[y].
Tensor ce_loss(const ProbMap& probs, std::span<const std::int32_t> labels);
// Per-image mean cross-entropy values (no gradient).
std::vector<double> ce_per_image(const ProbMap& probs, std::span<const std::int32_t> labels);

// Batch mean of per-image ce_loss.
Tensor sup_loss(const ProbMap& main_probs, std::span<const std::int32_t> labels);

struct AuxLossResult {
  Tensor value;
  std::vector<double> main_ce;               // per image
  std::vector<std::vector<double>> aux_ce;   // [k][image]
  std::vector<std::vector<bool>> gate_open;  // [k][image]

  double gate_fraction() const;
  double mean_aux_ce(std::size_t k) const;
};

// (1/B) sum_b sum_k 1{ce(P^k_b) > alpha_k * ce(P_b)} * ce(P^k_b). The gate
// and the threshold are constants; only aux_probs receive gradient.
AuxLossResult aux_loss(const ProbMap& main_probs, std::span<const ProbMap> aux_probs,
                       std::span<const std::int32_t> labels, std::span<const double> alphas);

CorrectnessMask correctness_mask(const Tensor& probs, std::span<const std::int32_t> labels);

ValidityMap validity_from_probabilities(const Tensor& values);

struct BceResult {
  Tensor value;
  std::vector<double> negative_weight;  // per image; 1 where the fallback applied
  std::int64_t fallback_images = 0;     // images whose mask was all zeros
};

// Per image: -(1/HW) sum_i [m_i ln b_i + w (1 - m_i) ln(1 - b_i)] with
// w = #{m=1} / #{m=0}; batch mean over images. An all-zero mask falls back
// to w = 1 and is counted in fallback_images.
BceResult weighted_bce(const ValidityMap& validity, const CorrectnessMask& mask);

struct ElnLossResult {
  Tensor value;
  std::vector<double> per_decoder;
  std::int64_t fallback_images = 0;
};

// Mean over the K+1 (validity, mask) pairs of weighted_bce.
ElnLossResult eln_loss(std::span<const ValidityMap> validities, std::span<const CorrectnessMask> masks);

Tensor labeled_total(const Tensor& sup, const Tensor& aux, const Tensor& eln);

PseudoLabelMap pseudo_labels(const Tensor& teacher_probs);

// round(b) with round(0.5) = 1.
BinaryMap round_validity(const Tensor& validity_values);

struct PseudoLossResult {
  Tensor value;
  std::int64_t valid_pixels = 0;
  std::int64_t total_pixels = 0;

  double valid_fraction() const {
    return total_pixels == 0 ? 0.0 : static_cast<double>(valid_pixels) / static_cast<double>(total_pixels);
  }
};

// sum_i mask_i * (-ln P^a_i[pseudo_i]) / max(1, #valid).
PseudoLossResult pseudo_loss(const ProbMap& student_probs, const PseudoLabelMap& pseudo, const BinaryMap& valid);
PseudoLossResult pseudo_loss(const ProbMap& student_probs, const PseudoLabelMap& pseudo, const Tensor& validity_values);

struct ContrastiveConfig {
  double temperature = 0.5;
  int max_anchors = 64;
  int max_positives = 16;
  int max_negatives = 64;
  // Divide each anchor's sum over positives by its positive count so the
  // loss scale does not grow with max_positives.
  bool average_positives = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const ContrastiveConfig& cfg);
void from_json(const nlohmann::json& j, ContrastiveConfig& cfg);

// Flat pixel indices b * h * w + y * w + x over the whole batch.
struct ContrastiveBatchIndex {
  std::vector<std::int64_t> anchors;
  std::vector<std::vector<std::int64_t>> positives;  // per anchor, same pseudo class, valid
  std::vector<std::vector<std::int64_t>> negatives;  // per anchor, other classes, valid
  std::int64_t valid_pixels = 0;
};

ContrastiveBatchIndex build_contrastive_index(const PseudoLabelMap& labels, const BinaryMap& valid,
                                              const ContrastiveConfig& cfg, std::uint64_t seed);

struct ContrastiveResult {
  Tensor value;
  std::int64_t anchors = 0;
  double mean_positives = 0.0;
  double mean_negatives = 0.0;
};

// -(1/|anchors|) sum_i sum_{j in pos(i)} ln[d(f_i, t_j) / (d(f_i, t_j) + sum_{k in neg(i)} d(f_i, t_k))]
// with d(a, b) = exp(cos(a, b) / tau). Teacher embeddings carry no gradient.
ContrastiveResult contrastive_loss(const Tensor& student_embedding, const Tensor& teacher_embedding,
                                   const ContrastiveBatchIndex& index, const ContrastiveConfig& cfg);
ContrastiveResult contrastive_loss(const Tensor& student_embedding, const Tensor& teacher_embedding,
                                   const PseudoLabelMap& labels, const BinaryMap& valid,
                                   const ContrastiveConfig& cfg, std::uint64_t seed);

// Nearest-neighbour resampling (source index floor(dst * in / out)).
PseudoLabelMap downsample_nearest(const PseudoLabelMap& labels, std::int64_t height, std::int64_t width);
BinaryMap downsample_nearest(const BinaryMap& mask, std::int64_t height, std::int64_t width);

Tensor unlabeled_total(const Tensor& pseudo, const Tensor& contra);

}  // namespace eln

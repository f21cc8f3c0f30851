#include "eln/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "eln/datagen.hpp"
#include "eln/ops.hpp"
#include "eln/random.hpp"

namespace eln {

namespace {

void require_labels(const Tensor& probs, std::span<const std::int32_t> labels, const char* what) {
  if (probs.rank() != 4) throw ShapeError(std::string(what) + ": expected [B, C, H, W] probabilities");
  const auto n = probs.dim(0) * probs.dim(2) * probs.dim(3);
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw ShapeError(std::string(what) + ": " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                     " pixels");
  }
  const auto classes = probs.dim(1);
  for (auto y : labels) {
    if (y < 0 || y >= classes) {
      throw LossError(std::string(what) + ": label " + std::to_string(y) + " outside [0, " +
                      std::to_string(classes - 1) + "]");
    }
  }
}

void require_mask_shape(const Tensor& t, const BinaryMap& m, const char* what) {
  if (t.rank() != 4 || t.dim(0) != m.batch || t.dim(2) != m.height || t.dim(3) != m.width) {
    throw ShapeError(std::string(what) + ": mask [" + std::to_string(m.batch) + ", " + std::to_string(m.height) +
                     ", " + std::to_string(m.width) + "] does not match " + shape_str(t.shape()));
  }
}

// Stable log(sigmoid(z)).
double log_sigmoid(double z) { return std::min(z, 0.0) - std::log1p(std::exp(-std::fabs(z))); }
double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

std::int64_t BinaryMap::count() const {
  return std::count(values.begin(), values.end(), std::uint8_t{1});
}

std::vector<std::int32_t> argmax_classes(const Tensor& probs) {
  if (probs.rank() != 4) throw ShapeError("argmax_classes: expected [B, C, H, W]");
  const std::int64_t batch = probs.dim(0), classes = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  auto p = probs.data();
  std::vector<std::int32_t> out(static_cast<std::size_t>(batch * hw));
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t i = 0; i < hw; ++i) {
      std::int32_t best = 0;
      float best_v = p[static_cast<std::size_t>(b * classes * hw + i)];
      for (std::int64_t c = 1; c < classes; ++c) {
        const float v = p[static_cast<std::size_t>((b * classes + c) * hw + i)];
        if (v > best_v) {
          best_v = v;
          best = static_cast<std::int32_t>(c);
        }
      }
      out[static_cast<std::size_t>(b * hw + i)] = best;
    }
  }
  return out;
}

Tensor weighted_nll(const Tensor& log_probs, std::span<const std::int32_t> labels, std::span<const float> weights,
                    double normalizer) {
  require_labels(log_probs, labels, "weighted_nll");
  if (weights.size() != labels.size()) throw ShapeError("weighted_nll: weight count mismatch");
  if (!(normalizer > 0.0)) throw LossError("weighted_nll: normalizer must be positive");
  const std::int64_t batch = log_probs.dim(0), classes = log_probs.dim(1), hw = log_probs.dim(2) * log_probs.dim(3);
  auto lp = log_probs.data();
  double total = 0.0;
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t i = 0; i < hw; ++i) {
      const auto px = static_cast<std::size_t>(b * hw + i);
      if (weights[px] == 0.0F) continue;
      total -= static_cast<double>(weights[px]) * lp[static_cast<std::size_t>((b * classes + labels[px]) * hw + i)];
    }
  }
  std::vector<std::int32_t> y(labels.begin(), labels.end());
  std::vector<float> w(weights.begin(), weights.end());
  return Tensor::make_result(
      {}, {static_cast<float>(total / normalizer)}, {log_probs},
      [=, y = std::move(y), w = std::move(w)](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        const double go = self.grad[0] / normalizer;
        for (std::int64_t b = 0; b < batch; ++b) {
          for (std::int64_t i = 0; i < hw; ++i) {
            const auto px = static_cast<std::size_t>(b * hw + i);
            if (w[px] == 0.0F) continue;
            g[static_cast<std::size_t>((b * classes + y[px]) * hw + i)] -= static_cast<float>(go * w[px]);
          }
        }
      });
}

Tensor ce_loss(const ProbMap& probs, std::span<const std::int32_t> labels) {
  const std::vector<float> ones(labels.size(), 1.0F);
  return weighted_nll(probs.log_probs, labels, ones, static_cast<double>(labels.size()));
}

std::vector<double> ce_per_image(const ProbMap& probs, std::span<const std::int32_t> labels) {
  require_labels(probs.log_probs, labels, "ce_per_image");
  const std::int64_t batch = probs.log_probs.dim(0), classes = probs.log_probs.dim(1);
  const std::int64_t hw = probs.log_probs.dim(2) * probs.log_probs.dim(3);
  auto lp = probs.log_probs.data();
  std::vector<double> out(static_cast<std::size_t>(batch), 0.0);
  for (std::int64_t b = 0; b < batch; ++b) {
    double s = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) {
      s -= lp[static_cast<std::size_t>((b * classes + labels[static_cast<std::size_t>(b * hw + i)]) * hw + i)];
    }
    out[static_cast<std::size_t>(b)] = s / static_cast<double>(hw);
  }
  return out;
}

Tensor sup_loss(const ProbMap& main_probs, std::span<const std::int32_t> labels) {
  if (!main_probs.log_probs.defined() || main_probs.log_probs.dim(0) == 0 || labels.empty()) {
    throw LossError("sup_loss: empty batch");
  }
  // Equal-sized images: the batch mean of per-image means is the global mean.
  return ce_loss(main_probs, labels);
}

double AuxLossResult::gate_fraction() const {
  std::size_t open = 0, total = 0;
  for (const auto& row : gate_open) {
    for (bool g : row) {
      open += g ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(open) / static_cast<double>(total);
}

double AuxLossResult::mean_aux_ce(std::size_t k) const {
  const auto& row = aux_ce.at(k);
  return row.empty() ? 0.0 : std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size());
}

AuxLossResult aux_loss(const ProbMap& main_probs, std::span<const ProbMap> aux_probs,
                       std::span<const std::int32_t> labels, std::span<const double> alphas) {
  if (aux_probs.size() != alphas.size()) {
    throw LossError("aux_loss: " + std::to_string(aux_probs.size()) + " auxiliary predictions but " +
                    std::to_string(alphas.size()) + " alphas");
  }
  AuxLossResult r;
  r.main_ce = ce_per_image(main_probs, labels);
  const std::int64_t batch = main_probs.log_probs.dim(0);
  const std::int64_t hw = main_probs.log_probs.dim(2) * main_probs.log_probs.dim(3);
  std::vector<Tensor> terms;
  for (std::size_t k = 0; k < aux_probs.size(); ++k) {
    if (aux_probs[k].log_probs.shape() != main_probs.log_probs.shape()) throw ShapeError("aux_loss: shape mismatch");
    auto ce = ce_per_image(aux_probs[k], labels);
    std::vector<bool> open(static_cast<std::size_t>(batch));
    std::vector<float> weights(labels.size(), 0.0F);
    for (std::int64_t b = 0; b < batch; ++b) {
      const auto bi = static_cast<std::size_t>(b);
      open[bi] = ce[bi] > alphas[k] * r.main_ce[bi];
      if (open[bi]) {
        std::fill_n(weights.begin() + b * hw, hw, 1.0F);
      }
    }
    // Closed gates keep the decoder in the graph with zero weight so that
    // its parameters receive an explicit zero gradient.
    terms.push_back(
        weighted_nll(aux_probs[k].log_probs, labels, weights, static_cast<double>(batch * hw)));
    r.aux_ce.push_back(std::move(ce));
    r.gate_open.push_back(std::move(open));
  }
  r.value = add_scalars(terms);
  return r;
}

CorrectnessMask correctness_mask(const Tensor& probs, std::span<const std::int32_t> labels) {
  require_labels(probs, labels, "correctness_mask");
  auto pred = argmax_classes(probs);
  CorrectnessMask m = BinaryMap::filled(probs.dim(0), probs.dim(2), probs.dim(3), 0);
  for (std::size_t i = 0; i < pred.size(); ++i) m.values[i] = pred[i] == labels[i] ? 1 : 0;
  return m;
}

ValidityMap validity_from_probabilities(const Tensor& values) {
  auto in = values.data();
  std::vector<float> z(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double p = in[i];
    if (!(p > 0.0 && p < 1.0)) throw LossError("validity values must lie strictly inside (0, 1)");
    z[i] = static_cast<float>(std::log(p) - std::log1p(-p));
  }
  ValidityMap v;
  v.values = values;
  v.logits = Tensor::make_result(values.shape(), std::move(z), {values}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double q = p.data[i];
      g[i] += static_cast<float>(self.grad[i] / (q * (1.0 - q)));
    }
  });
  return v;
}

BceResult weighted_bce(const ValidityMap& validity, const CorrectnessMask& mask) {
  const Tensor& logits = validity.logits;
  require_mask_shape(logits, mask, "weighted_bce");
  if (logits.dim(1) != 1) throw ShapeError("weighted_bce: validity must have one channel");
  const std::int64_t batch = mask.batch, hw = mask.pixels_per_image();
  BceResult r;
  r.negative_weight.resize(static_cast<std::size_t>(batch));
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto begin = mask.values.begin() + b * hw;
    const auto ones = std::count(begin, begin + hw, std::uint8_t{1});
    const auto zeros = hw - ones;
    double w = 1.0;
    if (ones == 0) {
      ++r.fallback_images;
    } else if (zeros > 0) {
      w = static_cast<double>(ones) / static_cast<double>(zeros);
    }
    r.negative_weight[static_cast<std::size_t>(b)] = w;
  }

  auto z = logits.data();
  double total = 0.0;
  for (std::int64_t b = 0; b < batch; ++b) {
    const double w = r.negative_weight[static_cast<std::size_t>(b)];
    double s = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) {
      const auto px = static_cast<std::size_t>(b * hw + i);
      s -= mask.values[px] ? log_sigmoid(z[px]) : w * log_sigmoid(-z[px]);
    }
    total += s / static_cast<double>(hw);
  }
  const double denom = static_cast<double>(batch * hw);
  r.value = Tensor::make_result(
      {}, {static_cast<float>(total / static_cast<double>(batch))}, {logits},
      [=, m = mask.values, weights = r.negative_weight](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        const double go = self.grad[0] / denom;
        for (std::int64_t b = 0; b < batch; ++b) {
          const double w = weights[static_cast<std::size_t>(b)];
          for (std::int64_t i = 0; i < hw; ++i) {
            const auto px = static_cast<std::size_t>(b * hw + i);
            const double s = sigmoid(p.data[px]);
            const double d = m[px] ? -(1.0 - s) : w * s;
            g[px] += static_cast<float>(go * d);
          }
        }
      });
  return r;
}

ElnLossResult eln_loss(std::span<const ValidityMap> validities, std::span<const CorrectnessMask> masks) {
  if (validities.size() != masks.size() || validities.empty()) {
    throw LossError("eln_loss: " + std::to_string(validities.size()) + " validity maps for " +
                    std::to_string(masks.size()) + " masks");
  }
  ElnLossResult r;
  std::vector<Tensor> terms;
  for (std::size_t k = 0; k < validities.size(); ++k) {
    auto bce = weighted_bce(validities[k], masks[k]);
    r.per_decoder.push_back(bce.value.item());
    r.fallback_images += bce.fallback_images;
    terms.push_back(bce.value);
  }
  r.value = scale(add_scalars(terms), 1.0F / static_cast<float>(validities.size()));
  return r;
}

Tensor labeled_total(const Tensor& sup, const Tensor& aux, const Tensor& eln) {
  const Tensor terms[] = {sup, aux, eln};
  return add_scalars(terms);
}

PseudoLabelMap pseudo_labels(const Tensor& teacher_probs) {
  PseudoLabelMap m;
  m.values = argmax_classes(teacher_probs);
  m.batch = teacher_probs.dim(0);
  m.height = teacher_probs.dim(2);
  m.width = teacher_probs.dim(3);
  return m;
}

BinaryMap round_validity(const Tensor& validity_values) {
  if (validity_values.rank() != 4 || validity_values.dim(1) != 1) throw ShapeError("validity must be [B, 1, H, W]");
  BinaryMap m = BinaryMap::filled(validity_values.dim(0), validity_values.dim(2), validity_values.dim(3), 0);
  auto v = validity_values.data();
  for (std::size_t i = 0; i < v.size(); ++i) m.values[i] = v[i] >= 0.5F ? 1 : 0;
  return m;
}

PseudoLossResult pseudo_loss(const ProbMap& student_probs, const PseudoLabelMap& pseudo, const BinaryMap& valid) {
  require_mask_shape(student_probs.log_probs, valid, "pseudo_loss");
  if (pseudo.batch != valid.batch || pseudo.height != valid.height || pseudo.width != valid.width) {
    throw ShapeError("pseudo_loss: pseudo labels and validity are not aligned");
  }
  PseudoLossResult r;
  r.valid_pixels = valid.count();
  r.total_pixels = static_cast<std::int64_t>(valid.values.size());
  std::vector<float> weights(valid.values.begin(), valid.values.end());
  r.value = weighted_nll(student_probs.log_probs, pseudo.values, weights,
                         static_cast<double>(std::max<std::int64_t>(1, r.valid_pixels)));
  return r;
}

PseudoLossResult pseudo_loss(const ProbMap& student_probs, const PseudoLabelMap& pseudo, const Tensor& validity_values) {
  return pseudo_loss(student_probs, pseudo, round_validity(validity_values));
}

void ContrastiveConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("contrastive.temperature must be > 0");
  if (max_anchors < 1 || max_positives < 1 || max_negatives < 1) {
    throw ConfigError("contrastive sampling caps must be >= 1");
  }
}

void to_json(nlohmann::json& j, const ContrastiveConfig& cfg) {
  j = nlohmann::json{{"temperature", cfg.temperature},
                     {"max_anchors", cfg.max_anchors},
                     {"max_positives", cfg.max_positives},
                     {"max_negatives", cfg.max_negatives},
                     {"average_positives", cfg.average_positives}};
}

void from_json(const nlohmann::json& j, ContrastiveConfig& cfg) {
  for (const auto& [key, value] : j.items()) {
    if (key == "temperature") {
      cfg.temperature = value.get<double>();
    } else if (key == "max_anchors") {
      cfg.max_anchors = value.get<int>();
    } else if (key == "max_positives") {
      cfg.max_positives = value.get<int>();
    } else if (key == "average_positives") {
      cfg.average_positives = value.get<bool>();
    } else if (key == "max_negatives") {
      cfg.max_negatives = value.get<int>();
    } else {
      throw ConfigError("unknown key 'contrastive." + key + "'");
    }
  }
}

ContrastiveBatchIndex build_contrastive_index(const PseudoLabelMap& labels, const BinaryMap& valid,
                                              const ContrastiveConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (labels.batch != valid.batch || labels.height != valid.height || labels.width != valid.width) {
    throw ShapeError("contrastive index: labels and validity are not aligned");
  }
  ContrastiveBatchIndex idx;
  std::vector<std::int64_t> pool;
  for (std::size_t i = 0; i < valid.values.size(); ++i) {
    if (valid.values[i]) pool.push_back(static_cast<std::int64_t>(i));
  }
  idx.valid_pixels = static_cast<std::int64_t>(pool.size());
  if (pool.empty()) return idx;

  Rng rng(derive_seed({seed, 0xC0417ULL}));
  auto pick = [&rng](const std::vector<std::int64_t>& from, int cap) {
    if (static_cast<std::int64_t>(from.size()) <= cap) return from;
    auto chosen = rng.sample_without_replacement(from.size(), static_cast<std::size_t>(cap));
    std::sort(chosen.begin(), chosen.end());
    std::vector<std::int64_t> out;
    out.reserve(chosen.size());
    for (auto c : chosen) out.push_back(from[c]);
    return out;
  };

  idx.anchors = pick(pool, cfg.max_anchors);
  std::int32_t max_class = 0;
  for (auto p : pool) max_class = std::max(max_class, labels.values[static_cast<std::size_t>(p)]);
  std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(max_class) + 1);
  for (auto p : pool) by_class[static_cast<std::size_t>(labels.values[static_cast<std::size_t>(p)])].push_back(p);

  for (auto a : idx.anchors) {
    const auto cls = labels.values[static_cast<std::size_t>(a)];
    idx.positives.push_back(pick(by_class[static_cast<std::size_t>(cls)], cfg.max_positives));
    std::vector<std::int64_t> others;
    for (auto p : pool) {
      if (labels.values[static_cast<std::size_t>(p)] != cls) others.push_back(p);
    }
    idx.negatives.push_back(pick(others, cfg.max_negatives));
  }
  return idx;
}

ContrastiveResult contrastive_loss(const Tensor& student_embedding, const Tensor& teacher_embedding,
                                   const ContrastiveBatchIndex& index, const ContrastiveConfig& cfg) {
  cfg.validate();
  if (student_embedding.rank() != 4 || student_embedding.shape() != teacher_embedding.shape()) {
    throw ShapeError("contrastive_loss: student/teacher embeddings must share shape [B, D, h, w]");
  }
  const std::int64_t dim = student_embedding.dim(1), hw = student_embedding.dim(2) * student_embedding.dim(3);
  const std::int64_t npix = student_embedding.dim(0) * hw;
  auto check = [npix](std::int64_t p) {
    if (p < 0 || p >= npix) throw ShapeError("contrastive_loss: pixel index out of range");
  };

  ContrastiveResult r;
  r.anchors = static_cast<std::int64_t>(index.anchors.size());
  if (index.anchors.empty()) {
    r.value = Tensor::make_result({}, {0.0F}, {student_embedding}, [](detail::Node&) {});
    return r;
  }

  // Gathers the D-vector of pixel p, normalised to unit length.
  auto unit = [dim, hw](std::span<const float> data, std::int64_t p, std::vector<double>& out, double& norm) {
    const std::int64_t b = p / hw, i = p % hw;
    out.resize(static_cast<std::size_t>(dim));
    double s = 0.0;
    for (std::int64_t d = 0; d < dim; ++d) {
      out[static_cast<std::size_t>(d)] = data[static_cast<std::size_t>((b * dim + d) * hw + i)];
      s += out[static_cast<std::size_t>(d)] * out[static_cast<std::size_t>(d)];
    }
    norm = std::max(std::sqrt(s), 1e-12);
    for (auto& v : out) v /= norm;
  };

  const double inv_tau = 1.0 / cfg.temperature;
  auto fs = student_embedding.data();
  auto ft = teacher_embedding.data();
  double total = 0.0;
  double pos_count = 0.0, neg_count = 0.0;
  // Per anchor: dL/df_i (unscaled by 1/|anchors|).
  std::vector<std::vector<double>> anchor_grads(index.anchors.size());
  std::vector<double> u, t, tmp;
  for (std::size_t a = 0; a < index.anchors.size(); ++a) {
    const auto i = index.anchors[a];
    check(i);
    double norm_i = 0.0;
    unit(fs, i, u, norm_i);
    const auto& pos = index.positives.at(a);
    const auto& neg = index.negatives.at(a);
    pos_count += static_cast<double>(pos.size());
    neg_count += static_cast<double>(neg.size());

    std::vector<double> s_pos(pos.size()), s_neg(neg.size());
    std::vector<std::vector<double>> t_pos(pos.size()), t_neg(neg.size());
    double unused = 0.0;
    for (std::size_t j = 0; j < pos.size(); ++j) {
      check(pos[j]);
      unit(ft, pos[j], t_pos[j], unused);
      s_pos[j] = inv_tau * std::inner_product(u.begin(), u.end(), t_pos[j].begin(), 0.0);
    }
    double s_max = 0.0;
    for (std::size_t k = 0; k < neg.size(); ++k) {
      check(neg[k]);
      unit(ft, neg[k], t_neg[k], unused);
      s_neg[k] = inv_tau * std::inner_product(u.begin(), u.end(), t_neg[k].begin(), 0.0);
    }
    for (double s : s_pos) s_max = std::max(s_max, s);
    for (double s : s_neg) s_max = std::max(s_max, s);
    double neg_sum = 0.0;  // scaled by exp(-s_max)
    for (double s : s_neg) neg_sum += std::exp(s - s_max);

    const double pw = cfg.average_positives && !pos.empty() ? 1.0 / static_cast<double>(pos.size()) : 1.0;
    std::vector<double> g_pos(pos.size(), 0.0), g_neg(neg.size(), 0.0);
    for (std::size_t j = 0; j < pos.size(); ++j) {
      const double ep = std::exp(s_pos[j] - s_max);
      const double z = ep + neg_sum;
      total -= pw * ((s_pos[j] - s_max) - std::log(z));
      g_pos[j] += pw * (-1.0 + ep / z);
      for (std::size_t k = 0; k < neg.size(); ++k) g_neg[k] += pw * std::exp(s_neg[k] - s_max) / z;
    }

    // dL/du = sum g * t / tau; dL/df = (I - u u^T) dL/du / |f|.
    std::vector<double> du(static_cast<std::size_t>(dim), 0.0);
    for (std::size_t j = 0; j < pos.size(); ++j) {
      for (std::int64_t d = 0; d < dim; ++d) du[static_cast<std::size_t>(d)] += g_pos[j] * t_pos[j][static_cast<std::size_t>(d)] * inv_tau;
    }
    for (std::size_t k = 0; k < neg.size(); ++k) {
      for (std::int64_t d = 0; d < dim; ++d) du[static_cast<std::size_t>(d)] += g_neg[k] * t_neg[k][static_cast<std::size_t>(d)] * inv_tau;
    }
    const double proj = std::inner_product(u.begin(), u.end(), du.begin(), 0.0);
    auto& gf = anchor_grads[a];
    gf.resize(static_cast<std::size_t>(dim));
    for (std::int64_t d = 0; d < dim; ++d) {
      const auto di = static_cast<std::size_t>(d);
      gf[di] = (du[di] - u[di] * proj) / norm_i;
    }
  }
  const double n_anchors = static_cast<double>(index.anchors.size());
  r.mean_positives = pos_count / n_anchors;
  r.mean_negatives = neg_count / n_anchors;
  r.value = Tensor::make_result(
      {}, {static_cast<float>(total / n_anchors)}, {student_embedding},
      [=, anchors = index.anchors, grads = std::move(anchor_grads)](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        const double go = self.grad[0] / n_anchors;
        for (std::size_t a = 0; a < anchors.size(); ++a) {
          const std::int64_t b = anchors[a] / hw, i = anchors[a] % hw;
          for (std::int64_t d = 0; d < dim; ++d) {
            g[static_cast<std::size_t>((b * dim + d) * hw + i)] += static_cast<float>(go * grads[a][static_cast<std::size_t>(d)]);
          }
        }
      });
  return r;
}

ContrastiveResult contrastive_loss(const Tensor& student_embedding, const Tensor& teacher_embedding,
                                   const PseudoLabelMap& labels, const BinaryMap& valid,
                                   const ContrastiveConfig& cfg, std::uint64_t seed) {
  if (student_embedding.rank() != 4 || labels.batch != student_embedding.dim(0) ||
      labels.height != student_embedding.dim(2) || labels.width != student_embedding.dim(3)) {
    throw ShapeError("contrastive_loss: pseudo labels are not at embedding resolution");
  }
  return contrastive_loss(student_embedding, teacher_embedding, build_contrastive_index(labels, valid, cfg, seed), cfg);
}

PseudoLabelMap downsample_nearest(const PseudoLabelMap& labels, std::int64_t height, std::int64_t width) {
  PseudoLabelMap out{labels.batch, height, width, std::vector<std::int32_t>(static_cast<std::size_t>(labels.batch * height * width))};
  for (std::int64_t b = 0; b < labels.batch; ++b) {
    for (std::int64_t y = 0; y < height; ++y) {
      const std::int64_t sy = y * labels.height / height;
      for (std::int64_t x = 0; x < width; ++x) {
        const std::int64_t sx = x * labels.width / width;
        out.values[static_cast<std::size_t>((b * height + y) * width + x)] =
            labels.values[static_cast<std::size_t>((b * labels.height + sy) * labels.width + sx)];
      }
    }
  }
  return out;
}

BinaryMap downsample_nearest(const BinaryMap& mask, std::int64_t height, std::int64_t width) {
  BinaryMap out = BinaryMap::filled(mask.batch, height, width, 0);
  for (std::int64_t b = 0; b < mask.batch; ++b) {
    for (std::int64_t y = 0; y < height; ++y) {
      const std::int64_t sy = y * mask.height / height;
      for (std::int64_t x = 0; x < width; ++x) {
        const std::int64_t sx = x * mask.width / width;
        out.values[static_cast<std::size_t>((b * height + y) * width + x)] =
            mask.values[static_cast<std::size_t>((b * mask.height + sy) * mask.width + sx)];
      }
    }
  }
  return out;
}

Tensor unlabeled_total(const Tensor& pseudo, const Tensor& contra) {
  const Tensor terms[] = {pseudo, contra};
  return add_scalars(terms);
}

}  // namespace eln

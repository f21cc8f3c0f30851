// Property checks shared by the unit tests and the acceptance binary. Each
// returns a CheckResult with a one-line detail for reporting.

#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "eln/losses.hpp"
#include "eln/networks.hpp"
#include "eln/ops.hpp"
#include "eln/random.hpp"
#include "eln/training.hpp"
#include "loss_oracles.hpp"

namespace check {

struct CheckResult {
  bool passed = true;
  std::string detail;
  int cases = 0;

  void fail(const std::string& why) {
    if (passed) detail = why;
    passed = false;
  }
};

inline std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

inline oracle::Field random_field(eln::Rng& rng, int b, int c, int h, int w, double scale) {
  oracle::Field f{b, c, h, w, {}};
  f.v.resize(static_cast<std::size_t>(b * c * h * w));
  // Round through float so oracle and library see identical inputs.
  for (auto& x : f.v) x = static_cast<float>(scale * rng.normal());
  return f;
}

inline eln::Tensor to_tensor(const oracle::Field& f, bool grad = false) {
  std::vector<float> d(f.v.begin(), f.v.end());
  return eln::Tensor::from_data({f.b, f.c, f.h, f.w}, std::move(d), grad);
}

inline std::vector<int> random_labels(eln::Rng& rng, int n, int classes) {
  std::vector<int> y(static_cast<std::size_t>(n));
  for (auto& v : y) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
  return y;
}

inline std::vector<std::int32_t> as_i32(const std::vector<int>& v) { return {v.begin(), v.end()}; }

inline eln::ValidityMap validity_from_logits(const eln::Tensor& logits) { return {logits, eln::sigmoid(logits)}; }

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline std::vector<double> sigmoid_all(const std::vector<double>& z) {
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = sigmoid(z[i]);
  return out;
}

inline eln::CorrectnessMask to_mask(const std::vector<int>& m, int b, int h, int w) {
  eln::CorrectnessMask out = eln::BinaryMap::filled(b, h, w, 0);
  for (std::size_t i = 0; i < m.size(); ++i) out.values[i] = static_cast<std::uint8_t>(m[i]);
  return out;
}

// Relative agreement; values whose magnitude is below `floor` are compared
// on that scale instead.
inline bool close(double got, double want, double rtol, double floor) {
  return std::fabs(got - want) <= rtol * std::max({std::fabs(want), std::fabs(got), floor});
}

// One random small loss instance: B <= 2, H = W <= 8, C <= 4, D <= 8.
struct Instance {
  int b, c, h, w, d, k;
  oracle::Field main, teacher_logits, emb_student, emb_teacher;
  std::vector<oracle::Field> aux;
  std::vector<double> alphas;
  std::vector<int> labels;
  std::vector<std::vector<double>> eln_logits;  // K+1 maps of [B, 1, H, W]
  std::vector<std::vector<int>> masks;
  std::vector<double> validity;  // probabilities for the pseudo-label mask
  std::vector<int> emb_labels, emb_valid;
  eln::ContrastiveConfig contra;
  std::uint64_t contra_seed;

  static Instance draw(eln::Rng& rng) {
    Instance in{};
    in.b = 1 + static_cast<int>(rng.below(2));
    in.c = 2 + static_cast<int>(rng.below(3));
    in.h = in.w = 2 + static_cast<int>(rng.below(7));
    in.d = 2 + static_cast<int>(rng.below(7));
    in.k = 1 + static_cast<int>(rng.below(3));
    const int n = in.b * in.h * in.w;
    in.main = random_field(rng, in.b, in.c, in.h, in.w, 1.5);
    in.teacher_logits = random_field(rng, in.b, in.c, in.h, in.w, 1.5);
    in.labels = random_labels(rng, n, in.c);
    for (int k = 0; k < in.k; ++k) {
      in.aux.push_back(random_field(rng, in.b, in.c, in.h, in.w, 1.5));
      in.alphas.push_back(rng.uniform(0.5, 1.5));
    }
    for (int k = 0; k <= in.k; ++k) {
      auto z = random_field(rng, in.b, 1, in.h, in.w, 1.5).v;
      in.eln_logits.push_back(z);
      std::vector<int> m(static_cast<std::size_t>(n));
      const double p_one = rng.uniform(0.1, 0.9);
      for (auto& v : m) v = rng.bernoulli(p_one) ? 1 : 0;
      // Exercise the all-zero fallback now and then.
      if (rng.bernoulli(0.15)) std::fill(m.begin(), m.end(), 0);
      in.masks.push_back(m);
    }
    in.validity.resize(static_cast<std::size_t>(n));
    for (auto& v : in.validity) v = static_cast<float>(rng.uniform(0.01, 0.99));
    in.emb_student = random_field(rng, in.b, in.d, in.h, in.w, 1.0);
    in.emb_teacher = random_field(rng, in.b, in.d, in.h, in.w, 1.0);
    in.emb_labels = random_labels(rng, n, in.c);
    in.emb_valid.resize(static_cast<std::size_t>(n));
    for (auto& v : in.emb_valid) v = rng.bernoulli(0.75) ? 1 : 0;
    in.contra.temperature = rng.uniform(0.2, 1.0);
    in.contra.max_anchors = 1 + static_cast<int>(rng.below(12));
    in.contra.max_positives = 1 + static_cast<int>(rng.below(6));
    in.contra.max_negatives = 1 + static_cast<int>(rng.below(12));
    in.contra.average_positives = rng.bernoulli(0.5);
    in.contra_seed = rng.next();
    return in;
  }

  // True when some aux gate sits so close to its threshold that float and
  // double could disagree; such instances are redrawn.
  bool gate_ambiguous() const {
    for (int bi = 0; bi < b; ++bi) {
      const double m = oracle::ce_image(main, labels, bi);
      for (int k = 0; k < this->k; ++k) {
        const double a = oracle::ce_image(aux[static_cast<std::size_t>(k)], labels, bi);
        if (std::fabs(a - alphas[static_cast<std::size_t>(k)] * m) < 1e-3 * std::max(1.0, a)) return true;
      }
    }
    return false;
  }

  eln::PseudoLabelMap pseudo_map() const {
    const auto probs = eln::ProbMap::from_logits(to_tensor(teacher_logits)).probs;
    return eln::pseudo_labels(probs);
  }

  oracle::Field teacher_probs() const {
    const auto probs = eln::ProbMap::from_logits(to_tensor(teacher_logits)).probs;
    oracle::Field f{b, c, h, w, {}};
    for (float v : probs.data()) f.v.push_back(v);
    return f;
  }

  eln::Tensor validity_tensor() const {
    return eln::Tensor::from_data({b, 1, h, w}, std::vector<float>(validity.begin(), validity.end()));
  }

  eln::BinaryMap emb_valid_map() const {
    return to_mask(emb_valid, b, h, w);
  }

  eln::PseudoLabelMap emb_label_map() const {
    return eln::PseudoLabelMap{b, h, w, as_i32(emb_labels)};
  }

  eln::ContrastiveBatchIndex contrastive_index() const {
    return eln::build_contrastive_index(emb_label_map(), emb_valid_map(), contra, contra_seed);
  }
};

inline std::vector<int> to_int(const std::vector<std::int64_t>& v) { return {v.begin(), v.end()}; }

inline std::vector<std::vector<int>> to_int(const std::vector<std::vector<std::int64_t>>& v) {
  std::vector<std::vector<int>> out;
  for (const auto& x : v) out.push_back(to_int(x));
  return out;
}

// Library value of every loss for one instance, keyed like the oracle list.
struct LossValues {
  double ce, sup, aux, bce, eln, pseudo, contra;
};

inline LossValues library_values(const Instance& in) {
  const auto labels = as_i32(in.labels);
  const auto main = eln::ProbMap::from_logits(to_tensor(in.main));
  std::vector<eln::ProbMap> aux;
  for (const auto& a : in.aux) aux.push_back(eln::ProbMap::from_logits(to_tensor(a)));
  std::vector<eln::ValidityMap> vals;
  std::vector<eln::CorrectnessMask> masks;
  for (int k = 0; k <= in.k; ++k) {
    vals.push_back(validity_from_logits(to_tensor(oracle::Field{in.b, 1, in.h, in.w, in.eln_logits[static_cast<std::size_t>(k)]})));
    masks.push_back(to_mask(in.masks[static_cast<std::size_t>(k)], in.b, in.h, in.w));
  }
  LossValues v{};
  v.ce = eln::ce_loss(main, labels).item();
  v.sup = eln::sup_loss(main, labels).item();
  v.aux = eln::aux_loss(main, aux, labels, in.alphas).value.item();
  v.bce = eln::weighted_bce(vals[0], masks[0]).value.item();
  v.eln = eln::eln_loss(vals, masks).value.item();
  v.pseudo = eln::pseudo_loss(eln::ProbMap::from_logits(to_tensor(in.aux[0])), in.pseudo_map(), in.validity_tensor())
                 .value.item();
  v.contra = eln::contrastive_loss(to_tensor(in.emb_student), to_tensor(in.emb_teacher), in.contrastive_index(),
                                   in.contra)
                 .value.item();
  return v;
}

inline LossValues oracle_values(const Instance& in) {
  const int hw = in.h * in.w;
  std::vector<std::vector<double>> validities;
  for (const auto& z : in.eln_logits) validities.push_back(sigmoid_all(z));
  const auto idx = in.contrastive_index();
  LossValues v{};
  v.ce = oracle::ce(in.main, in.labels);
  v.sup = oracle::sup(in.main, in.labels);
  v.aux = oracle::aux(in.main, in.aux, in.labels, in.alphas);
  v.bce = oracle::weighted_bce(validities[0], in.masks[0], in.b, hw);
  v.eln = oracle::eln(validities, in.masks, in.b, hw);
  v.pseudo = oracle::pseudo(in.aux[0], in.teacher_probs(), in.validity);
  v.contra = oracle::contrastive(in.emb_student, in.emb_teacher, to_int(idx.anchors), to_int(idx.positives),
                                 to_int(idx.negatives), in.contra.temperature, in.contra.average_positives);
  return v;
}

inline const char* const kLossNames[] = {"ce_loss", "sup_loss", "aux_loss", "weighted_bce", "eln_loss",
                                         "pseudo_loss", "contrastive_loss"};

inline std::vector<double> as_list(const LossValues& v) { return {v.ce, v.sup, v.aux, v.bce, v.eln, v.pseudo, v.contra}; }

// Every loss against its oracle on `instances` random instances.
inline CheckResult loss_oracle_suite(std::uint64_t seed, int instances, double rtol = 1e-5) {
  CheckResult r;
  eln::Rng rng(seed);
  int done = 0;
  while (done < instances) {
    auto in = Instance::draw(rng);
    if (in.gate_ambiguous()) continue;
    const auto got = as_list(library_values(in));
    const auto want = as_list(oracle_values(in));
    for (std::size_t i = 0; i < got.size(); ++i) {
      // Values are O(1); the floor only matters for losses that are exactly
      // or nearly zero (closed gates, empty masks).
      if (!close(got[i], want[i], rtol, 1e-3)) {
        r.fail(std::string(kLossNames[i]) + fmt(": library %.9g vs oracle %.9g", got[i], want[i]));
      }
      ++r.cases;
    }
    ++done;
  }
  if (r.passed) r.detail = std::to_string(done) + " instances x 7 losses agree within rtol " + fmt("%.0e", rtol, 0);
  return r;
}

// Compares the analytic gradient of `loss` (w.r.t. `input`) with central
// differences of `f` on `coords` random coordinates.
inline void compare_gradients(CheckResult& r, const std::string& name, const eln::Tensor& input,
                              const eln::Tensor& loss, const std::vector<double>& x,
                              const std::function<double(const std::vector<double>&)>& f, eln::Rng& rng, int coords,
                              double step, double rtol) {
  loss.backward();
  std::vector<float> analytic(static_cast<std::size_t>(input.numel()), 0.0F);
  if (input.has_grad()) {
    auto g = input.grad();
    std::copy(g.begin(), g.end(), analytic.begin());
  }
  for (int i = 0; i < coords; ++i) {
    const auto idx = static_cast<std::size_t>(rng.below(x.size()));
    const double numeric = oracle::central_difference(f, x, idx, step);
    const double a = analytic[idx];
    ++r.cases;
    // Coordinates where both are below 1e-6 count as agreeing zeros.
    if (std::max(std::fabs(a), std::fabs(numeric)) < 1e-6) continue;
    if (!close(a, numeric, rtol, 0.0)) r.fail(name + fmt(": analytic %.6g vs numeric %.6g", a, numeric));
  }
}

inline CheckResult gradient_suite(std::uint64_t seed, int instances, int coords = 10, double step = 1e-3,
                                  double rtol = 1e-2) {
  CheckResult r;
  eln::Rng rng(seed);
  int done = 0;
  while (done < instances) {
    auto in = Instance::draw(rng);
    if (in.gate_ambiguous()) continue;
    const auto labels = as_i32(in.labels);
    const int hw = in.h * in.w;
    auto with = [](oracle::Field f, const std::vector<double>& x) {
      f.v = x;
      return f;
    };
    {
      auto t = to_tensor(in.main, true);
      compare_gradients(r, "ce_loss", t, eln::ce_loss(eln::ProbMap::from_logits(t), labels), in.main.v,
                        [&](const std::vector<double>& x) { return oracle::ce(with(in.main, x), in.labels); }, rng,
                        coords, step, rtol);
    }
    {
      auto t = to_tensor(in.main, true);
      compare_gradients(r, "sup_loss", t, eln::sup_loss(eln::ProbMap::from_logits(t), labels), in.main.v,
                        [&](const std::vector<double>& x) { return oracle::sup(with(in.main, x), in.labels); }, rng,
                        coords, step, rtol);
    }
    {
      auto t = to_tensor(in.aux[0], true);
      std::vector<eln::ProbMap> aux{eln::ProbMap::from_logits(t)};
      for (std::size_t k = 1; k < in.aux.size(); ++k) aux.push_back(eln::ProbMap::from_logits(to_tensor(in.aux[k])));
      const auto main = eln::ProbMap::from_logits(to_tensor(in.main));
      compare_gradients(r, "aux_loss", t, eln::aux_loss(main, aux, labels, in.alphas).value, in.aux[0].v,
                        [&](const std::vector<double>& x) {
                          auto a = in.aux;
                          a[0].v = x;
                          return oracle::aux(in.main, a, in.labels, in.alphas);
                        },
                        rng, coords, step, rtol);
    }
    {
      const oracle::Field z{in.b, 1, in.h, in.w, in.eln_logits[0]};
      auto t = to_tensor(z, true);
      const auto mask = to_mask(in.masks[0], in.b, in.h, in.w);
      compare_gradients(r, "weighted_bce", t, eln::weighted_bce(validity_from_logits(t), mask).value, z.v,
                        [&](const std::vector<double>& x) {
                          return oracle::weighted_bce(sigmoid_all(x), in.masks[0], in.b, hw);
                        },
                        rng, coords, step, rtol);
    }
    {
      const oracle::Field z{in.b, 1, in.h, in.w, in.eln_logits[0]};
      auto t = to_tensor(z, true);
      std::vector<eln::ValidityMap> vals{validity_from_logits(t)};
      std::vector<eln::CorrectnessMask> masks{to_mask(in.masks[0], in.b, in.h, in.w)};
      for (int k = 1; k <= in.k; ++k) {
        vals.push_back(validity_from_logits(to_tensor(oracle::Field{in.b, 1, in.h, in.w, in.eln_logits[static_cast<std::size_t>(k)]})));
        masks.push_back(to_mask(in.masks[static_cast<std::size_t>(k)], in.b, in.h, in.w));
      }
      compare_gradients(r, "eln_loss", t, eln::eln_loss(vals, masks).value, z.v,
                        [&](const std::vector<double>& x) {
                          std::vector<std::vector<double>> v;
                          for (const auto& zl : in.eln_logits) v.push_back(sigmoid_all(zl));
                          v[0] = sigmoid_all(x);
                          return oracle::eln(v, in.masks, in.b, hw);
                        },
                        rng, coords, step, rtol);
    }
    {
      auto t = to_tensor(in.aux[0], true);
      const auto tp = in.teacher_probs();
      compare_gradients(r, "pseudo_loss", t,
                        eln::pseudo_loss(eln::ProbMap::from_logits(t), in.pseudo_map(), in.validity_tensor()).value,
                        in.aux[0].v,
                        [&](const std::vector<double>& x) { return oracle::pseudo(with(in.aux[0], x), tp, in.validity); },
                        rng, coords, step, rtol);
    }
    {
      auto t = to_tensor(in.emb_student, true);
      const auto idx = in.contrastive_index();
      const auto a = to_int(idx.anchors);
      const auto p = to_int(idx.positives);
      const auto n = to_int(idx.negatives);
      compare_gradients(r, "contrastive_loss", t,
                        eln::contrastive_loss(t, to_tensor(in.emb_teacher), idx, in.contra).value, in.emb_student.v,
                        [&](const std::vector<double>& x) {
                          return oracle::contrastive(with(in.emb_student, x), in.emb_teacher, a, p, n,
                                                     in.contra.temperature, in.contra.average_positives);
                        },
                        rng, coords, step, rtol);
    }
    ++done;
  }
  if (r.passed) {
    r.detail = std::to_string(r.cases) + " coordinates over 7 losses agree within rtol " + fmt("%.0e", rtol, 0);
  }
  return r;
}

inline bool all_zero(const eln::Tensor& t) {
  if (!t.has_grad()) return true;
  for (float g : t.grad()) {
    if (g != 0.0F) return false;
  }
  return true;
}

inline bool any_nonzero(const eln::Tensor& t) { return !all_zero(t); }

inline eln::Tensor random_images(eln::Rng& rng, int b, int h, int w) {
  std::vector<float> v(static_cast<std::size_t>(b * 3 * h * w));
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  return eln::Tensor::from_data({b, 3, h, w}, std::move(v));
}

// Closed gates give exactly zero gradient to their decoder; L_aux never
// reaches the encoder.
inline CheckResult gate_stop_gradient(std::uint64_t seed) {
  CheckResult r;
  eln::SegModelConfig cfg;
  cfg.num_aux_decoders = 3;
  eln::Rng rng(seed);
  eln::SegNet net(cfg, seed);
  eln::AuxDecoders aux(cfg, seed + 1);
  const auto images = random_images(rng, 2, 16, 16);
  const auto labels = as_i32(random_labels(rng, 2 * 16 * 16, cfg.num_classes));
  // Open, closed, and per-image mixed gates.
  const std::vector<std::vector<double>> alpha_sets{{0.0, 1e9, 0.0}, {1e9, 1e9, 1e9}, {0.0, 0.0, 0.0}};
  for (const auto& alphas : alpha_sets) {
    net.params().zero_grad();
    aux.params().zero_grad();
    const auto features = net.encode(images);
    const auto main = eln::ProbMap::from_logits(net.decode(features, false).logits);
    const auto detached = features.detached();
    std::vector<eln::ProbMap> aux_probs;
    for (std::size_t k = 0; k < aux.size(); ++k) {
      aux_probs.push_back(eln::ProbMap::from_logits(aux[k].forward(detached, false).logits));
    }
    auto res = eln::aux_loss(main, aux_probs, labels, alphas);
    res.value.backward();
    for (const auto& p : net.params().entries()) {
      ++r.cases;
      if (!all_zero(p.value)) r.fail("encoder/main parameter " + p.name + " received L_aux gradient");
    }
    for (std::size_t k = 0; k < aux.size(); ++k) {
      bool open = false;
      for (bool g : res.gate_open[k]) open = open || g;
      bool nonzero = false;
      for (const auto* p : aux.params_of(k)) {
        ++r.cases;
        if (!open && !all_zero(p->value)) r.fail("closed gate: " + p->name + " has non-zero gradient");
        nonzero = nonzero || any_nonzero(p->value);
      }
      if (open && !nonzero) r.fail("open gate but decoder " + std::to_string(k + 1) + " got no gradient");
    }
  }
  if (r.passed) r.detail = "closed gates and the encoder receive exactly zero gradient (" + std::to_string(r.cases) + " tensors)";
  return r;
}

// Pixels with round(validity) = 0 give exactly zero gradient to the student
// logits; an all-zero mask gives L_pseudo = 0.
inline CheckResult mask_property(std::uint64_t seed, int instances) {
  CheckResult r;
  eln::Rng rng(seed);
  for (int n = 0; n < instances; ++n) {
    auto in = Instance::draw(rng);
    if (n % 4 == 0) std::fill(in.validity.begin(), in.validity.end(), 0.3);
    auto t = to_tensor(in.aux[0], true);
    auto res = eln::pseudo_loss(eln::ProbMap::from_logits(t), in.pseudo_map(), in.validity_tensor());
    res.value.backward();
    const int hw = in.h * in.w;
    bool any_valid = false;
    for (int b = 0; b < in.b; ++b) {
      for (int i = 0; i < hw; ++i) {
        if (in.validity[static_cast<std::size_t>(b * hw + i)] >= 0.5) {
          any_valid = true;
          continue;
        }
        for (int c = 0; c < in.c; ++c) {
          ++r.cases;
          const float g = t.has_grad() ? t.grad()[static_cast<std::size_t>((b * in.c + c) * hw + i)] : 0.0F;
          if (g != 0.0F) r.fail(fmt("masked pixel has gradient %.3g (instance %.0f)", g, n));
        }
      }
    }
    if (!any_valid && res.value.item() != 0.0F) r.fail(fmt("all-zero mask gives L_pseudo = %.3g%.0s", res.value.item(), 0));
  }
  if (r.passed) r.detail = std::to_string(r.cases) + " masked logits with exactly zero gradient; empty mask gives 0";
  return r;
}

// Constant student, beta = 0.995: every element obeys
// |teacher_t - student| = beta^t |teacher_0 - student|, and so does the norm
// ratio ||teacher_t - student|| / ||teacher_0 - student||.
inline CheckResult ema_decay_law(std::uint64_t seed, int steps = 100, double tol = 1e-6) {
  CheckResult r;
  eln::SegModelConfig cfg;
  eln::SegNet student(cfg, seed);
  eln::SegNet teacher(cfg, seed + 17);
  std::vector<std::vector<double>> gap0;
  for (std::size_t i = 0; i < student.params().size(); ++i) {
    auto a = teacher.params().entries()[i].value.data();
    auto b = student.params().entries()[i].value.data();
    std::vector<double> g(a.size());
    for (std::size_t k = 0; k < a.size(); ++k) g[k] = std::fabs(double(a[k]) - double(b[k]));
    gap0.push_back(std::move(g));
  }
  double norm0 = 0.0;
  for (const auto& g : gap0) {
    for (double x : g) norm0 += x * x;
  }
  norm0 = std::sqrt(norm0);
  const auto student_sum = student.params().checksum();
  double worst = 0.0, worst_ratio = 0.0;
  for (int t = 1; t <= steps; ++t) {
    eln::ema_update(teacher.params(), student.params(), 0.995);
    const double decay = std::pow(0.995, t);
    double norm = 0.0;
    for (std::size_t i = 0; i < student.params().size(); ++i) {
      auto a = teacher.params().entries()[i].value.data();
      auto b = student.params().entries()[i].value.data();
      for (std::size_t k = 0; k < a.size(); ++k) {
        const double gap = std::fabs(double(a[k]) - double(b[k]));
        worst = std::max(worst, std::fabs(gap - decay * gap0[i][k]));
        norm += gap * gap;
        ++r.cases;
      }
    }
    worst_ratio = std::max(worst_ratio, std::fabs(std::sqrt(norm) / norm0 - decay));
  }
  if (student.params().checksum() != student_sum) r.fail("ema_update modified the student");
  if (worst > tol) r.fail(fmt("max elementwise deviation %.3g > %.1g", worst, tol));
  if (worst_ratio > tol) r.fail(fmt("max |norm ratio - beta^t| = %.3g > %.1g", worst_ratio, tol));
  if (r.passed) {
    r.detail = fmt("max elementwise deviation %.2g, max norm-ratio deviation %.2g", worst, worst_ratio) + " over " +
               std::to_string(steps) + " steps";
  }
  return r;
}

// Single anchor, one positive (cos 1), one negative (cos 0), tau = 0.5, plus
// permutation invariance and monotonicity probes.
inline CheckResult contrastive_closed_form(std::uint64_t seed) {
  CheckResult r;
  eln::ContrastiveConfig cfg;
  cfg.temperature = 0.5;
  // Pixels: 0 anchor, 1 positive, 2 negative; D = 2.
  auto emb = [](std::vector<float> xy) { return eln::Tensor::from_data({1, 2, 1, 3}, std::move(xy)); };
  const auto student = emb({1, 0, 0, 0, 0, 0});
  auto teacher_with = [&](double pos_angle, double neg_angle) {
    return emb({0, static_cast<float>(std::cos(pos_angle)), static_cast<float>(std::cos(neg_angle)), 0,
                static_cast<float>(std::sin(pos_angle)), static_cast<float>(std::sin(neg_angle))});
  };
  eln::ContrastiveBatchIndex idx;
  idx.anchors = {0};
  idx.positives = {{1}};
  idx.negatives = {{2}};
  const double got = eln::contrastive_loss(student, teacher_with(0.0, M_PI / 2), idx, cfg).value.item();
  const double want = -std::log(std::exp(2.0) / (std::exp(2.0) + 1.0));
  ++r.cases;
  if (std::fabs(got - want) > 1e-6) r.fail(fmt("closed form: got %.9f, want %.9f", got, want));

  // Permutation invariance on a random instance.
  eln::Rng rng(seed);
  for (int n = 0; n < 20; ++n) {
    const int h = 4, w = 4, d = 5;
    const auto fs = to_tensor(random_field(rng, 1, d, h, w, 1.0));
    const auto ft = to_tensor(random_field(rng, 1, d, h, w, 1.0));
    eln::ContrastiveBatchIndex a;
    for (int k = 0; k < 4; ++k) {
      a.anchors.push_back(static_cast<std::int64_t>(rng.below(h * w)));
      std::vector<std::int64_t> pos, neg;
      for (int j = 0; j < 3; ++j) pos.push_back(static_cast<std::int64_t>(rng.below(h * w)));
      for (int j = 0; j < 5; ++j) neg.push_back(static_cast<std::int64_t>(rng.below(h * w)));
      a.positives.push_back(pos);
      a.negatives.push_back(neg);
    }
    auto b = a;
    std::reverse(b.anchors.begin(), b.anchors.end());
    std::reverse(b.positives.begin(), b.positives.end());
    std::reverse(b.negatives.begin(), b.negatives.end());
    for (auto& p : b.positives) rng.shuffle(p);
    for (auto& q : b.negatives) rng.shuffle(q);
    const double la = eln::contrastive_loss(fs, ft, a, cfg).value.item();
    const double lb = eln::contrastive_loss(fs, ft, b, cfg).value.item();
    ++r.cases;
    if (std::fabs(la - lb) > 1e-6 * std::max(1.0, std::fabs(la))) r.fail(fmt("permutation changed loss: %.9g vs %.9g", la, lb));
  }

  // Monotonicity: loss falls as the positive aligns and rises as the
  // negative aligns.
  double prev_pos = INFINITY, prev_neg = -INFINITY;
  for (int s = 0; s <= 8; ++s) {
    const double ang = M_PI * (1.0 - s / 8.0);
    const double lp = eln::contrastive_loss(student, teacher_with(ang, M_PI / 2), idx, cfg).value.item();
    const double ln = eln::contrastive_loss(student, teacher_with(0.0, ang), idx, cfg).value.item();
    r.cases += 2;
    if (!(lp < prev_pos)) r.fail(fmt("loss did not decrease as positive aligned: %.6g after %.6g", lp, prev_pos));
    if (!(ln > prev_neg)) r.fail(fmt("loss did not increase as negative aligned: %.6g after %.6g", ln, prev_neg));
    prev_pos = lp;
    prev_neg = ln;
  }
  if (r.passed) r.detail = fmt("closed form |got - want| = %.2g; permutation and monotonicity probes hold%.0s", std::fabs(got - want), 0);
  return r;
}

}  // namespace check

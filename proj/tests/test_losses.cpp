#include <doctest.h>

#include <cmath>

#include "eln/losses.hpp"
#include "oracles/criteria.hpp"

using namespace eln;

TEST_CASE("every loss matches its loop oracle on random instances") {
  const auto r = check::loss_oracle_suite(101, 60);
  INFO(r.detail);
  CHECK(r.passed);
}

TEST_CASE("analytic gradients match central differences for every loss") {
  const auto r = check::gradient_suite(202, 12);
  INFO(r.detail);
  CHECK(r.passed);
}

TEST_CASE("closed gates and the encoder get exactly zero auxiliary gradient") {
  const auto r = check::gate_stop_gradient(303);
  INFO(r.detail);
  CHECK(r.passed);
}

TEST_CASE("masked pixels give exactly zero pseudo-label gradient") {
  const auto r = check::mask_property(404, 40);
  INFO(r.detail);
  CHECK(r.passed);
}

TEST_CASE("contrastive loss closed form, permutation invariance and monotonicity") {
  const auto r = check::contrastive_closed_form(505);
  INFO(r.detail);
  CHECK(r.passed);
}

TEST_CASE("aux gate compares against alpha times the main loss per image") {
  // Two images: main CE differs, aux CE equal; alpha picks one of them.
  auto logits = [](std::vector<float> v) { return ProbMap::from_logits(Tensor::from_data({2, 2, 1, 1}, std::move(v))); };
  const std::vector<std::int32_t> labels{0, 0};
  const auto main = logits({3.0F, 0.0F, 1.0F, 0.0F});
  const std::vector<ProbMap> aux{logits({0.0F, 0.0F, 0.0F, 0.0F})};
  const double ln2 = std::log(2.0);
  const double ce0 = std::log1p(std::exp(-3.0)), ce1 = std::log1p(std::exp(-1.0));
  const double alpha = 0.5 * (ln2 / ce0 + ln2 / ce1);  // opens image 0 only
  const std::vector<double> alphas{alpha};
  auto r = aux_loss(main, aux, labels, alphas);
  CHECK(r.gate_open[0][0]);
  CHECK_FALSE(r.gate_open[0][1]);
  CHECK(r.value.item() == doctest::Approx(ln2 / 2).epsilon(1e-6));
  CHECK(r.gate_fraction() == doctest::Approx(0.5));
}

TEST_CASE("aux_loss rejects a mismatched alpha list") {
  auto p = ProbMap::from_logits(Tensor::zeros({1, 2, 1, 1}));
  const std::vector<ProbMap> aux{p, p};
  const std::vector<double> alphas{20.0};
  const std::vector<std::int32_t> labels{0};
  CHECK_THROWS_AS(aux_loss(p, aux, labels, alphas), LossError);
}

TEST_CASE("weighted BCE balances classes and falls back on all-zero masks") {
  auto v = check::validity_from_logits(Tensor::from_data({1, 1, 1, 4}, {0.0F, 0.0F, 0.0F, 0.0F}));
  auto mask = BinaryMap::filled(1, 1, 4, 0);
  mask.values = {1, 1, 1, 0};
  auto r = weighted_bce(v, mask);
  CHECK(r.negative_weight[0] == doctest::Approx(3.0));
  CHECK(r.value.item() == doctest::Approx((3 + 3) * std::log(2.0) / 4).epsilon(1e-6));
  auto zeros = BinaryMap::filled(1, 1, 4, 0);
  auto z = weighted_bce(v, zeros);
  CHECK(z.fallback_images == 1);
  CHECK(z.negative_weight[0] == 1.0);
  CHECK(z.value.item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("round_validity maps 0.5 to one") {
  auto m = round_validity(Tensor::from_data({1, 1, 1, 3}, {0.49F, 0.5F, 0.51F}));
  CHECK(m.values == std::vector<std::uint8_t>{0, 1, 1});
}

TEST_CASE("pseudo labels break ties toward the lowest class") {
  auto probs = Tensor::from_data({1, 3, 1, 2}, {0.4F, 0.2F, 0.4F, 0.4F, 0.2F, 0.4F});
  auto p = pseudo_labels(probs);
  CHECK(p.values == std::vector<std::int32_t>{0, 1});
}

TEST_CASE("contrastive index respects classes, validity and caps") {
  Rng rng(9);
  for (int n = 0; n < 20; ++n) {
    auto in = check::Instance::draw(rng);
    const auto idx = in.contrastive_index();
    const auto valid = in.emb_valid_map();
    CHECK(static_cast<int>(idx.anchors.size()) <= in.contra.max_anchors);
    for (std::size_t a = 0; a < idx.anchors.size(); ++a) {
      const auto cls = in.emb_labels[static_cast<std::size_t>(idx.anchors[a])];
      CHECK(valid.values[static_cast<std::size_t>(idx.anchors[a])] == 1);
      CHECK(static_cast<int>(idx.positives[a].size()) <= in.contra.max_positives);
      CHECK(static_cast<int>(idx.negatives[a].size()) <= in.contra.max_negatives);
      for (auto p : idx.positives[a]) {
        CHECK(valid.values[static_cast<std::size_t>(p)] == 1);
        CHECK(in.emb_labels[static_cast<std::size_t>(p)] == cls);
      }
      for (auto q : idx.negatives[a]) {
        CHECK(valid.values[static_cast<std::size_t>(q)] == 1);
        CHECK(in.emb_labels[static_cast<std::size_t>(q)] != cls);
      }
    }
    CHECK(idx.valid_pixels == valid.count());
    // Same seed, same sample.
    const auto again = in.contrastive_index();
    CHECK(again.anchors == idx.anchors);
    CHECK(again.negatives == idx.negatives);
  }
}

TEST_CASE("contrastive loss sends no gradient to the teacher embedding") {
  Rng rng(12);
  auto fs = check::to_tensor(check::random_field(rng, 1, 4, 3, 3, 1.0), true);
  auto ft = check::to_tensor(check::random_field(rng, 1, 4, 3, 3, 1.0), true);
  ContrastiveBatchIndex idx{{0, 4}, {{0, 1}, {4}}, {{2, 3}, {5, 6, 7}}, 9};
  ContrastiveConfig cfg;
  contrastive_loss(fs, ft, idx, cfg).value.backward();
  CHECK(check::any_nonzero(fs));
  CHECK(check::all_zero(ft));
}

TEST_CASE("empty validity gives a zero contrastive loss") {
  PseudoLabelMap labels{1, 2, 2, {0, 1, 0, 1}};
  auto valid = BinaryMap::filled(1, 2, 2, 0);
  auto f = Tensor::full({1, 3, 2, 2}, 1.0F, true);
  auto r = contrastive_loss(f, f.detach(), labels, valid, ContrastiveConfig{}, 1);
  CHECK(r.anchors == 0);
  CHECK(r.value.item() == 0.0F);
}

TEST_CASE("nearest downsampling picks floor(dst * in / out)") {
  PseudoLabelMap labels{1, 4, 4, {}};
  for (int i = 0; i < 16; ++i) labels.values.push_back(i);
  auto d = downsample_nearest(labels, 2, 2);
  CHECK(d.values == std::vector<std::int32_t>{0, 2, 8, 10});
}

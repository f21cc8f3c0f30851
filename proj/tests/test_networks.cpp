#include <doctest.h>

#include <cmath>

#include "eln/networks.hpp"
#include "eln/ops.hpp"
#include "oracles/criteria.hpp"

using namespace eln;

TEST_CASE("segmentation network output shapes") {
  SegModelConfig cfg;
  SegNet net(cfg, 1);
  Rng rng(1);
  const auto x = check::random_images(rng, 2, 32, 16);
  const auto out = net.forward(x, true);
  CHECK(out.logits.shape() == Shape{2, cfg.num_classes, 32, 16});
  CHECK(out.embedding.shape() == Shape{2, cfg.embedding_dim, 8, 4});
  CHECK_FALSE(net.forward(x, false).embedding.defined());
  CHECK_THROWS_AS(net.forward(check::random_images(rng, 1, 20, 16)), ShapeError);
}

TEST_CASE("same seed gives identical parameters") {
  SegModelConfig cfg;
  CHECK(SegNet(cfg, 5).params().checksum() == SegNet(cfg, 5).params().checksum());
  CHECK(SegNet(cfg, 5).params().checksum() != SegNet(cfg, 6).params().checksum());
}

TEST_CASE("copy_values_from requires matching topology") {
  SegModelConfig cfg;
  SegNet a(cfg, 1), b(cfg, 2);
  b.params().copy_values_from(a.params());
  CHECK(a.params().checksum() == b.params().checksum());
  SegModelConfig other = cfg;
  other.decoder_channels = 8;
  SegNet c(other, 1);
  CHECK_THROWS_AS(c.params().copy_values_from(a.params()), std::invalid_argument);
}

TEST_CASE("auxiliary decoders are separate parameter groups") {
  SegModelConfig cfg;
  cfg.num_aux_decoders = 3;
  AuxDecoders aux(cfg, 3);
  CHECK(aux.size() == 3);
  std::size_t total = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    for (const auto* p : aux.params_of(k)) CHECK(p->name.rfind("aux" + std::to_string(k + 1) + ".", 0) == 0);
    total += aux.params_of(k).size();
  }
  CHECK(total == aux.params().size());
}

TEST_CASE("probabilities sum to one and entropy is normalised") {
  Rng rng(2);
  auto logits = check::to_tensor(check::random_field(rng, 2, 4, 3, 3, 2.0));
  const auto se = softmax_and_entropy(logits);
  for (int b = 0; b < 2; ++b) {
    for (int i = 0; i < 9; ++i) {
      double s = 0.0;
      for (int c = 0; c < 4; ++c) s += se.probs.probs.data()[static_cast<std::size_t>((b * 4 + c) * 9 + i)];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  for (float e : se.entropy.data()) CHECK((e >= 0.0F && e <= 1.0F + 1e-6F));
  const auto uniform = softmax_and_entropy(Tensor::zeros({1, 4, 1, 1}));
  CHECK(uniform.entropy.item() == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("ELN input is detached from the segmentation graph") {
  SegModelConfig cfg;
  SegNet net(cfg, 1);
  LocalizerModel eln(cfg.num_classes, 1, ElnConfig{}, 2);
  Rng rng(3);
  const auto x = check::random_images(rng, 1, 16, 16);
  const auto se = softmax_and_entropy(net.forward(x, false).logits);
  const auto in = build_eln_input(x, se.probs.probs, se.entropy);
  CHECK(in.stacked.shape() == Shape{1, 3 + cfg.num_classes + 1, 16, 16});
  auto v = eln_forward(eln.net(), in);
  CHECK(v.values.shape() == Shape{1, 1, 16, 16});
  sum(v.values).backward();
  for (const auto& p : net.params().entries()) CHECK(check::all_zero(p.value));
  bool any = false;
  for (const auto& p : eln.params().entries()) any = any || check::any_nonzero(p.value);
  CHECK(any);
}

TEST_CASE("s-ECN outputs class probabilities") {
  LocalizerModel secn(4, 4, ElnConfig{}, 1);
  Rng rng(4);
  const auto x = check::random_images(rng, 1, 8, 8);
  const auto in = build_eln_input(x, Tensor::full({1, 4, 8, 8}, 0.25F), Tensor::full({1, 1, 8, 8}, 1.0F));
  const auto p = secn_forward(secn.net(), in);
  CHECK(p.probs.shape() == Shape{1, 4, 8, 8});
}

#include <doctest.h>

#include <cmath>

#include "eln/metrics.hpp"

using namespace eln;

TEST_CASE("mIoU on a hand-computed confusion matrix") {
  ConfusionMatrix cm(3);
  const std::vector<std::int32_t> truth{0, 0, 1, 1, 2, 2};
  const std::vector<std::int32_t> pred{0, 1, 1, 1, 2, 0};
  accumulate_confusion(cm, pred, truth);
  const auto iou = per_class_iou(cm);
  CHECK(iou[0] == doctest::Approx(1.0 / 3));
  CHECK(iou[1] == doctest::Approx(2.0 / 3));
  CHECK(iou[2] == doctest::Approx(1.0 / 2));
  CHECK(miou(cm) == doctest::Approx((1.0 / 3 + 2.0 / 3 + 0.5) / 3));
}

TEST_CASE("absent classes are skipped and an empty matrix is an error") {
  ConfusionMatrix cm(3);
  CHECK_THROWS(miou(cm));
  const std::vector<std::int32_t> y{0, 1};
  accumulate_confusion(cm, y, y);
  CHECK(std::isnan(per_class_iou(cm)[2]));
  CHECK(miou(cm) == 1.0);
}

TEST_CASE("localization metrics average per image") {
  BinaryMap valid = BinaryMap::filled(2, 1, 4, 0);
  CorrectnessMask correct = BinaryMap::filled(2, 1, 4, 0);
  valid.values = {1, 1, 0, 0, 0, 0, 0, 0};
  correct.values = {1, 0, 1, 0, 1, 1, 0, 0};
  const auto r = localization_metrics(valid, correct);
  // Image 0: p = 1/2, r = 1/2. Image 1: nothing valid, p = r = 0.
  CHECK(r.precision == doctest::Approx(0.25));
  CHECK(r.recall == doctest::Approx(0.25));
  CHECK(r.f1 == doctest::Approx(0.25));
  CHECK(r.images_without_valid == 1);
}

TEST_CASE("threshold and s-ECN masks") {
  auto probs = Tensor::from_data({1, 2, 1, 3}, {0.9F, 0.6F, 0.3F, 0.1F, 0.4F, 0.7F});
  CHECK(threshold_mask(probs, 0.65).values == std::vector<std::uint8_t>{1, 0, 1});
  auto corrected = Tensor::from_data({1, 2, 1, 3}, {0.2F, 0.6F, 0.1F, 0.8F, 0.4F, 0.9F});
  CHECK(secn_valid_mask(corrected, probs).values == std::vector<std::uint8_t>{0, 1, 1});
}

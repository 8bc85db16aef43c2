#include <gtest/gtest.h>

#include <random>

#include "badpatch/detection.hpp"
#include "badpatch/error.hpp"
#include "badpatch/losses.hpp"
#include "oracles.hpp"

using namespace badpatch;

namespace {

Detection det(double p, Box box = {0, 0, 10, 10}) { return Detection{box, p, {1.0, 0.0}}; }

}  // namespace

TEST(Iou, Basics) {
  const Box a{0, 0, 2, 2};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, Box{5, 5, 1, 1}), 0.0);
  EXPECT_DOUBLE_EQ(iou(a, Box{1, 0, 2, 2}), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(iou(a, Box{1, 1, 0, 0}), 0.0);
}

TEST(Iou, SymmetricAndBounded) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 500; ++i) {
    const Box a = oracle::random_box(rng), b = oracle::random_box(rng);
    const double v = iou(a, b);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_DOUBLE_EQ(v, iou(b, a));
  }
}

TEST(CommonLoss, Examples) {
  const LossConfig c;
  EXPECT_EQ(common_detection_loss(std::vector<Detections>{{}, {}}, c), 0.0);
  EXPECT_EQ(common_detection_loss(std::vector<Detections>{}, c), 0.0);
  EXPECT_DOUBLE_EQ(common_detection_loss(std::vector<Detections>{{det(0.2), det(0.7), det(0.5)}}, c), 0.7);
  EXPECT_DOUBLE_EQ(common_detection_loss(std::vector<Detections>{{det(0.7)}, {det(0.3)}}, c), 0.5);
}

TEST(IouLoss, Examples) {
  const LossConfig c;
  const std::vector<std::vector<Box>> gt{{Box{0, 0, 10, 10}}};
  EXPECT_EQ(iou_detection_loss(std::vector<Detections>{{det(0.9, {50, 50, 5, 5})}}, gt, c), 0.0);
  // IoU 0.8 and 0.2 against the gt box.
  const Box high{0, 0, 8, 10};
  const Box low{0, 0, 2, 10};
  ASSERT_NEAR(iou(gt[0][0], high), 0.8, 1e-12);
  ASSERT_NEAR(iou(gt[0][0], low), 0.2, 1e-12);
  EXPECT_DOUBLE_EQ(iou_detection_loss(std::vector<Detections>{{det(0.6, high), det(0.9, low)}}, gt, c), 0.6);
  EXPECT_DOUBLE_EQ(iou_detection_loss(std::vector<Detections>{{det(0.6, high), det(0.4, gt[0][0])}}, gt, c), 0.5);
}

TEST(IouLoss, ImageWithoutKeptBoxesContributesZero) {
  const LossConfig c;
  const std::vector<std::vector<Box>> gt{{Box{0, 0, 10, 10}}, {}};
  const std::vector<Detections> batch{{det(0.8)}, {det(0.9)}};
  EXPECT_DOUBLE_EQ(iou_detection_loss(batch, gt, c), 0.4);
}

TEST(IouLoss, MismatchedBatch) {
  const std::vector<std::vector<Box>> gt{{}};
  EXPECT_THROW(iou_detection_loss(std::vector<Detections>{{}, {}}, gt, LossConfig{}), std::invalid_argument);
}

TEST(Losses, MatchBruteForceOracles) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const auto inst = oracle::random_loss_instance(rng);
    LossConfig c;
    c.iou_threshold = inst.iou_threshold;
    c.target_class = trial % 2;
    EXPECT_EQ(common_detection_loss(inst.batch, c), oracle::common_loss(inst.batch, c.target_class)) << trial;
    EXPECT_EQ(iou_detection_loss(inst.batch, inst.gt, c),
              oracle::iou_loss(inst.batch, inst.gt, c.iou_threshold, c.target_class))
        << trial;
  }
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  std::vector<Detections> batch(3);
  std::vector<std::vector<Box>> gt{{Box{0, 0, 10, 10}}, {Box{5, 5, 10, 10}}, {}};
  for (auto& img : batch) {
    for (int k = 0; k < 5; ++k) {
      const double pc = u(rng);
      img.push_back(Detection{oracle::random_box(rng), u(rng), {pc, 1.0 - pc}});
    }
  }
  batch[0].push_back(det(0.5, {0, 0, 9, 10}));
  for (LossKind kind : {LossKind::iou_detection, LossKind::common_detection}) {
    LossConfig c;
    c.kind = kind;
    const LossResult r = detection_loss(batch, gt, c);
    const double h = 1e-6;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      for (std::size_t k = 0; k < batch[i].size(); ++k) {
        auto plus = batch, minus = batch;
        plus[i][k].p_obj += h;
        minus[i][k].p_obj -= h;
        const double fd = (detection_loss(plus, gt, c).value - detection_loss(minus, gt, c).value) / (2 * h);
        EXPECT_NEAR(r.grads[i][k].d_obj, fd, 1e-6);
        plus = batch;
        minus = batch;
        plus[i][k].p_cls[0] += h;
        minus[i][k].p_cls[0] -= h;
        const double fdc = (detection_loss(plus, gt, c).value - detection_loss(minus, gt, c).value) / (2 * h);
        EXPECT_NEAR(r.grads[i][k].d_cls[0], fdc, 1e-6);
      }
    }
  }
}

TEST(Losses, KindNamesAndValidation) {
  EXPECT_EQ(parse_loss_kind("iou_detection"), LossKind::iou_detection);
  EXPECT_EQ(parse_loss_kind("common"), LossKind::common_detection);
  EXPECT_THROW(parse_loss_kind("l2"), ConfigError);
  LossConfig c;
  c.iou_threshold = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Nms, SuppressesOverlapsPerClass) {
  Detections dets{det(0.9, {0, 0, 10, 10}), det(0.8, {1, 0, 10, 10}), det(0.7, {30, 30, 10, 10})};
  const auto kept = non_max_suppression(dets, 0, 0.45);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_DOUBLE_EQ(kept[0].p_obj, 0.9);
  EXPECT_DOUBLE_EQ(kept[1].p_obj, 0.7);
}

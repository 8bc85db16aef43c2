#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "badpatch/detection.hpp"

namespace badpatch {

enum class LossKind { iou_detection, common_detection };

LossKind parse_loss_kind(std::string_view name);
std::string_view to_string(LossKind kind);

struct LossConfig {
  LossKind kind = LossKind::iou_detection;
  double iou_threshold = 0.5;
  int target_class = 0;  // person

  void validate() const;
};

/// Loss value together with dL/d(detector outputs), one entry per detection.
struct LossResult {
  double value = 0.0;
  std::vector<std::vector<DetectionGrad>> grads;
};

/// (1/N) sum_i max_j P_obj^j * P_cls^j[target]; empty images contribute 0.
double common_detection_loss(std::span<const Detections> batch, const LossConfig& config);

/// Per image: mean P over predictions whose best IoU with any ground-truth box
/// is strictly greater than the threshold, averaged over the batch. Images
/// with no such prediction contribute 0.
double iou_detection_loss(std::span<const Detections> batch,
                          std::span<const std::vector<Box>> gt, const LossConfig& config);

/// Dispatches on config.kind and also returns the gradient. `gt` is ignored
/// by the common loss.
LossResult detection_loss(std::span<const Detections> batch, std::span<const std::vector<Box>> gt,
                          const LossConfig& config);

}  // namespace badpatch

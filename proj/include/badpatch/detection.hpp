#pragma once

#include <vector>

namespace badpatch {

/// Axis-aligned box in image pixels: top-left corner plus extent.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w > 0.0 && h > 0.0 ? w * h : 0.0; }
  bool operator==(const Box&) const = default;
};

/// Intersection over union; 0 for disjoint or degenerate boxes.
double iou(const Box& a, const Box& b);

/// One detector output: box, objectness and per-class probabilities.
struct Detection {
  Box box;
  double p_obj = 0.0;
  std::vector<double> p_cls;

  /// P = P_obj * P_cls[cls]
  double confidence(int cls) const {
    return cls >= 0 && cls < static_cast<int>(p_cls.size()) ? p_obj * p_cls[static_cast<std::size_t>(cls)]
                                                            : 0.0;
  }
};

/// dL/dP_obj and dL/dP_cls for one detection.
struct DetectionGrad {
  double d_obj = 0.0;
  std::vector<double> d_cls;
};

using Detections = std::vector<Detection>;

/// Greedy non-maximum suppression on confidence for class `cls`.
Detections non_max_suppression(const Detections& dets, int cls, double iou_threshold);

}  // namespace badpatch

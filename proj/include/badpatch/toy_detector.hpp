#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include "badpatch/backends.hpp"

namespace badpatch {

struct ToyDetectorParams {
  std::uint64_t seed = 11;
  int stride = 4;
  std::vector<std::array<int, 2>> anchors = {{12, 24}, {16, 32}, {20, 40}, {24, 48}};
  // Anchors whose in-image part covers less than this fraction are dropped.
  double min_visible = 0.6;

  // Objectness logit weights.
  double obj_bias = -1.0;
  double w_box = 2.0;
  double w_core = 5.0;
  double w_ring = 6.0;
  double w_texture = 20.0;
  double w_head = 6.0;
  double w_legs = 6.0;
  // Person-class logit weights; class 1 ("other") is the complement.
  double cls_bias = -2.0;
  double c_core = 8.0;
  double c_texture = 8.0;
  // Multiplicative seeded jitter applied to every weight above, drawn
  // independently for each anchor (position and shape).
  double jitter = 0.2;

  double confidence_threshold = 0.01;
  double nms_iou = 0.45;

  static ToyDetectorParams from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Sliding-anchor detector over simple box statistics.
///
/// Per anchor: mean "redness" R - (G+B)/2 over the box, over a torso core,
/// over the head and leg bands and over the surrounding ring, plus mean local
/// gradient energy over the core.
/// Objectness and the person probability are sigmoids of affine functions of
/// those statistics. All box means use summed-area tables, and backward() uses
/// the transposed construction (2-D difference arrays).
class ToyDetector final : public DetectorBackend {
 public:
  explicit ToyDetector(ToyDetectorParams params = {});

  std::string name() const override { return "toy-detector"; }
  int num_classes() const override { return 2; }
  bool differentiable() const override { return true; }
  Concurrency concurrency() const override { return Concurrency::concurrent_read; }
  double confidence_threshold() const override { return params_.confidence_threshold; }
  double nms_iou() const override { return params_.nms_iou; }

  Detections detect_raw(const Image& image) const override;
  Image backward(const Image& image, std::span<const DetectionGrad> grads) const override;

  const ToyDetectorParams& params() const { return params_; }

 private:
  struct Rect {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    double area() const { return static_cast<double>(x1 - x0) * (y1 - y0); }
  };
  struct Weights {
    double obj_bias, w_box, w_core, w_ring, w_texture, w_head, w_legs, cls_bias, c_core, c_texture;
  };
  struct Anchor {
    Rect box, core, head, legs, outer;
    Weights wt{};
  };
  struct Features {
    double box_red = 0, core_red = 0, head_red = 0, legs_red = 0, ring_red = 0, core_texture = 0;
  };

  Weights anchor_weights(int cx, int cy, std::size_t shape) const;
  std::vector<Anchor> anchors_for(int height, int width) const;
  Features features(const Anchor& a, const std::vector<double>& red_sat,
                    const std::vector<double>& tex_sat, int width) const;
  static double obj_logit(const Weights& wt, const Features& f);
  static double cls_logit(const Weights& wt, const Features& f);

  ToyDetectorParams params_;
};

}  // namespace badpatch

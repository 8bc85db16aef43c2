#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "badpatch/detection.hpp"
#include "badpatch/tensor.hpp"

namespace badpatch {

using Rgb = std::array<double, 3>;

/// Reference image, target mask, prompt, background colour and patch scale.
struct PatchSpec {
  Image reference_image;
  Mask mask;
  Rgb background{0.5, 0.5, 0.5};
  std::string prompt;
  double tau = 0.2;

  void validate() const;
};

/// Scenes with ground-truth person boxes.
struct TrainingSet {
  std::vector<Image> images;
  std::vector<std::vector<Box>> person_boxes;

  std::size_t size() const { return images.size(); }
  void validate() const;
};

/// I' = I * m + s * (1 - m)
Image apply_background(const PatchSpec& spec);

/// Block majority: a cell is set iff at least half of its factor x factor
/// block is set. Masks are zero-padded up to a multiple of factor.
Mask downsample_mask(const Mask& mask, int factor);
Mask upsample_mask(const Mask& mask, int factor);

/// Ranges for the random patch transformation.
struct AugmentConfig {
  double max_rotation_deg = 20.0;
  double brightness = 0.1;
  double contrast_min = 0.8;
  double contrast_max = 1.2;
  double jitter = 0.05;

  static AugmentConfig identity() { return {0.0, 0.0, 1.0, 1.0, 0.0}; }
  bool is_identity() const;
  void validate() const;
  static AugmentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// One sampled transformation.
struct PatchTransform {
  double rotation_rad = 0.0;
  double brightness = 0.0;
  double contrast = 1.0;
  double jitter_x = 0.0;
  double jitter_y = 0.0;
};

PatchTransform sample_transform(const AugmentConfig& aug, std::mt19937_64& rng);

/// Record of one composite, sufficient for the backward pass w.r.t. the patch.
struct PatchTrace {
  struct Pixel {
    int y = 0;
    int x = 0;
    std::array<std::size_t, 4> src{};  // patch pixel offsets (y * width + x)
    std::array<double, 4> weight{};
    std::array<bool, 3> pass{};  // channel value was not clamped
  };
  Shape patch_shape{};
  double contrast = 1.0;
  double scale = 1.0;
  std::vector<Pixel> pixels;
};

/// Scale that makes the masked patch area equal (tau * sqrt(w * h))^2.
double patch_scale(const Box& box, const Mask& patch_mask, double tau);

/// Pastes the masked patch on the torso of `box` (centred horizontally, at
/// 35% of the box height) after rotation, brightness/contrast and placement
/// jitter. Colour is sampled bilinearly and the mask by nearest neighbour.
Image apply_patch(const Image& image, const Box& box, const Image& patch_image,
                  const Mask& patch_mask, double tau, const PatchTransform& transform,
                  PatchTrace* trace = nullptr);

/// Accumulates dL/dpatch into `patch_grad` from dL/d(composite). Also zeroes
/// `image_grad` at overwritten pixels when given, so traces can be chained in
/// reverse order of application.
void apply_patch_backward(const PatchTrace& trace, Image& image_grad, Image& patch_grad);

}  // namespace badpatch

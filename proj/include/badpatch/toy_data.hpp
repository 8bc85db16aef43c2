#pragma once

#include <cstdint>
#include <vector>

#include "badpatch/render.hpp"

namespace badpatch {

struct ToySceneConfig {
  int size = 64;
  int min_persons = 1;
  int max_persons = 2;
  int min_width = 14;
  int max_width = 22;
};

struct ToyScene {
  Image image;
  std::vector<Box> persons;
};

/// Smooth non-red background with 1-2 stylised persons (skin head, red shirt,
/// dark trousers). Deterministic in the seed.
ToyScene make_toy_scene(std::uint64_t seed, const ToySceneConfig& config = {});
TrainingSet make_toy_training_set(int count, std::uint64_t seed, const ToySceneConfig& config = {});

/// Soft-coloured flower used as the default reference patch.
Image make_reference_patch(int size = 16);
/// Centred disk covering roughly `fill` of the square.
Mask make_disk_mask(int size = 16, double fill = 0.7);
/// Uniform mid-gray square (control patch) with a full mask.
Image make_gray_patch(int size = 16);

}  // namespace badpatch

#include "badpatch/toy_data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "badpatch/error.hpp"
#include "badpatch/hash.hpp"

namespace badpatch {

namespace {

void fill_rect(Image& img, int x0, int y0, int x1, int y1, const Rgb& colour) {
  const int h = img.shape().height;
  const int w = img.shape().width;
  for (int y = std::max(0, y0); y < std::min(h, y1); ++y) {
    for (int x = std::max(0, x0); x < std::min(w, x1); ++x) {
      for (int c = 0; c < 3; ++c) img(c, y, x) = colour[static_cast<std::size_t>(c)];
    }
  }
}

void draw_person(Image& img, const Box& b, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const int x0 = static_cast<int>(b.x);
  const int y0 = static_cast<int>(b.y);
  const int w = static_cast<int>(b.w);
  const int h = static_cast<int>(b.h);
  const int head_end = y0 + static_cast<int>(std::lround(0.18 * h));
  const int shirt_end = y0 + static_cast<int>(std::lround(0.62 * h));

  const Rgb skin = {0.88 + 0.05 * u(rng), 0.68 + 0.05 * u(rng), 0.55 + 0.05 * u(rng)};
  const Rgb shirt = {0.78 + 0.08 * u(rng), 0.12 + 0.05 * u(rng), 0.14 + 0.05 * u(rng)};
  const Rgb trousers = {0.15 + 0.05 * u(rng), 0.16 + 0.05 * u(rng), 0.30 + 0.08 * u(rng)};

  const int head_w = std::max(4, static_cast<int>(std::lround(0.45 * w)));
  const int head_x = x0 + (w - head_w) / 2;
  fill_rect(img, head_x, y0, head_x + head_w, head_end, skin);
  fill_rect(img, x0, head_end, x0 + w, shirt_end, shirt);
  const int leg_w = std::max(2, static_cast<int>(std::lround(0.4 * w)));
  fill_rect(img, x0, shirt_end, x0 + leg_w, y0 + h, trousers);
  fill_rect(img, x0 + w - leg_w, shirt_end, x0 + w, y0 + h, trousers);
}

}  // namespace

ToyScene make_toy_scene(std::uint64_t seed, const ToySceneConfig& config) {
  if (config.size < 32 || config.min_persons < 1 || config.max_persons < config.min_persons ||
      config.max_persons > 2 || config.min_width < 6 || config.max_width < config.min_width ||
      2.1 * config.max_width > config.size) {
    throw ConfigError("toy scene: inconsistent configuration");
  }
  std::mt19937_64 rng(mix_seed(seed, 0x5ce9e));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const int n = config.size;

  // Low-frequency background whose redness R - (G+B)/2 stays negative.
  const double base_g = 0.35 + 0.35 * u01(rng);
  const double base_b = 0.35 + 0.35 * u01(rng);
  const double base_r = std::min(base_g, base_b) * (0.5 + 0.4 * u01(rng));
  const double phase_x = 2.0 * std::numbers::pi * u01(rng);
  const double phase_y = 2.0 * std::numbers::pi * u01(rng);
  ToyScene scene;
  scene.image = Image(Shape{3, n, n});
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double wave = 0.06 * std::sin(2.0 * std::numbers::pi * x / n + phase_x) +
                          0.06 * std::sin(2.0 * std::numbers::pi * y / n + phase_y);
      scene.image(0, y, x) = std::clamp(base_r + 0.5 * wave, 0.0, 1.0);
      scene.image(1, y, x) = std::clamp(base_g + wave, 0.0, 1.0);
      scene.image(2, y, x) = std::clamp(base_b - wave, 0.0, 1.0);
    }
  }

  std::uniform_int_distribution<int> count_dist(config.min_persons, config.max_persons);
  std::uniform_int_distribution<int> width_dist(config.min_width, config.max_width);
  const int count = count_dist(rng);
  for (int k = 0; k < count; ++k) {
    const int w = width_dist(rng);
    const int h = static_cast<int>(std::lround(2.1 * w));
    // Two persons get disjoint horizontal halves.
    const int lane_lo = count == 1 ? 0 : k * n / 2;
    const int lane_hi = count == 1 ? n : (k + 1) * n / 2;
    const int max_x = std::max(lane_lo, lane_hi - w);
    const int x = std::uniform_int_distribution<int>(lane_lo, max_x)(rng);
    const int y = std::uniform_int_distribution<int>(0, n - h)(rng);
    const Box box{static_cast<double>(x), static_cast<double>(y), static_cast<double>(std::min(w, n - x)),
                  static_cast<double>(h)};
    draw_person(scene.image, box, rng);
    scene.persons.push_back(box);
  }
  return scene;
}

TrainingSet make_toy_training_set(int count, std::uint64_t seed, const ToySceneConfig& config) {
  if (count < 0) throw ConfigError("toy training set: negative count");
  TrainingSet set;
  for (int i = 0; i < count; ++i) {
    ToyScene s = make_toy_scene(mix_seed(seed, static_cast<std::uint64_t>(i)), config);
    set.images.push_back(std::move(s.image));
    set.person_boxes.push_back(std::move(s.persons));
  }
  return set;
}

Image make_reference_patch(int size) {
  if (size < 4) throw ConfigError("reference patch: size must be >= 4");
  Image img(Shape{3, size, size});
  const double c = 0.5 * size;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dx = (x + 0.5 - c) / c;
      const double dy = (y + 0.5 - c) / c;
      const double r = std::hypot(dx, dy);
      const double petals = 0.5 + 0.5 * std::cos(5.0 * std::atan2(dy, dx));
      // Yellow centre, violet petals fading into pale green.
      const double centre = std::exp(-r * r / 0.05);
      const double petal = std::clamp(petals * (1.0 - r), 0.0, 1.0);
      img(0, y, x) = std::clamp(0.55 + 0.4 * centre + 0.1 * petal, 0.0, 1.0);
      img(1, y, x) = std::clamp(0.62 + 0.25 * centre - 0.3 * petal, 0.0, 1.0);
      img(2, y, x) = std::clamp(0.5 - 0.35 * centre + 0.3 * petal, 0.0, 1.0);
    }
  }
  return img;
}

Mask make_disk_mask(int size, double fill) {
  if (size < 2 || !(fill > 0.0 && fill <= 1.0)) throw ConfigError("disk mask: bad parameters");
  const double radius = std::sqrt(fill / std::numbers::pi) * size;
  const double c = 0.5 * size;
  Mask m(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) m.set(y, x, std::hypot(x + 0.5 - c, y + 0.5 - c) <= radius);
  }
  return m;
}

Image make_gray_patch(int size) { return Image(Shape{3, size, size}, 0.5); }

}  // namespace badpatch

#include "badpatch/toy_similarity.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <sstream>

namespace badpatch {

namespace {

const std::map<std::string, std::array<double, 3>>& colour_words() {
  static const std::map<std::string, std::array<double, 3>> words = {
      {"black", {0.0, 0.0, 0.0}},   {"white", {1.0, 1.0, 1.0}},    {"gray", {0.5, 0.5, 0.5}},
      {"grey", {0.5, 0.5, 0.5}},    {"red", {0.9, 0.1, 0.1}},      {"green", {0.1, 0.7, 0.2}},
      {"blue", {0.1, 0.2, 0.9}},    {"yellow", {0.95, 0.9, 0.1}},  {"orange", {0.95, 0.55, 0.1}},
      {"purple", {0.5, 0.15, 0.6}}, {"pink", {0.95, 0.6, 0.7}},    {"brown", {0.5, 0.3, 0.15}},
      {"cyan", {0.1, 0.85, 0.9}},   {"magenta", {0.9, 0.1, 0.8}},  {"violet", {0.6, 0.4, 0.9}},
      {"gold", {0.85, 0.7, 0.2}},   {"beige", {0.9, 0.85, 0.7}},   {"teal", {0.1, 0.5, 0.5}},
  };
  return words;
}

}  // namespace

ToyHistogramScorer::ToyHistogramScorer(int bins) : bins_(bins) {
  if (bins_ < 2 || bins_ > 32) throw ConfigError("toy-histogram: bins must lie in [2, 32]");
}

void ToyHistogramScorer::accumulate(std::vector<double>& hist, double r, double g, double b,
                                    double weight) const {
  std::array<std::array<int, 2>, 3> idx{};
  std::array<std::array<double, 2>, 3> wt{};
  const std::array<double, 3> rgb = {r, g, b};
  for (int c = 0; c < 3; ++c) {
    // Bin centres at (k + 0.5) / bins.
    const double pos = std::clamp(rgb[static_cast<std::size_t>(c)], 0.0, 1.0) * bins_ - 0.5;
    const int lo = std::clamp(static_cast<int>(std::floor(pos)), 0, bins_ - 1);
    const int hi = std::min(lo + 1, bins_ - 1);
    const double frac = std::clamp(pos - lo, 0.0, 1.0);
    idx[static_cast<std::size_t>(c)] = {lo, hi};
    wt[static_cast<std::size_t>(c)] = {1.0 - frac, frac};
  }
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      for (int k = 0; k < 2; ++k) {
        const double w = wt[0][static_cast<std::size_t>(i)] * wt[1][static_cast<std::size_t>(j)] *
                         wt[2][static_cast<std::size_t>(k)];
        if (w == 0.0) continue;
        const auto cell = static_cast<std::size_t>(
            (idx[0][static_cast<std::size_t>(i)] * bins_ + idx[1][static_cast<std::size_t>(j)]) * bins_ +
            idx[2][static_cast<std::size_t>(k)]);
        hist[cell] += weight * w;
      }
    }
  }
}

std::vector<double> ToyHistogramScorer::embed_image(const Image& image, const Mask* mask) const {
  if (image.shape().channels != 3) throw BackendError("toy-histogram: expected an RGB image");
  const int h = image.shape().height;
  const int w = image.shape().width;
  if (mask != nullptr && (mask->height() != h || mask->width() != w)) {
    throw BackendError("toy-histogram: mask size does not match image");
  }
  std::vector<double> hist(static_cast<std::size_t>(bins_ * bins_ * bins_), 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (mask != nullptr && !(*mask)(y, x)) continue;
      accumulate(hist, image(0, y, x), image(1, y, x), image(2, y, x), 1.0);
    }
  }
  return hist;
}

std::vector<double> ToyHistogramScorer::embed_text(std::string_view text) const {
  std::vector<double> hist(static_cast<std::size_t>(bins_ * bins_ * bins_), 0.0);
  std::string lowered(text);
  std::transform(lowered.begin(), lowered.end(), lowered.begin(), [](unsigned char ch) {
    return std::isalpha(ch) ? static_cast<char>(std::tolower(ch)) : ' ';
  });
  std::istringstream words(lowered);
  std::string word;
  double shade = 1.0;
  while (words >> word) {
    if (word == "dark") {
      shade = 0.6;
      continue;
    }
    if (word == "light" || word == "pale") {
      shade = 1.3;
      continue;
    }
    auto it = colour_words().find(word);
    if (it != colour_words().end()) {
      const auto& c = it->second;
      accumulate(hist, c[0] * shade, c[1] * shade, c[2] * shade, 1.0);
    }
    shade = 1.0;
  }
  return hist;
}

}  // namespace badpatch

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "badpatch/tensor.hpp"

namespace badpatch {

/// 8-bit RGB (or grayscale, replicated) image file -> CHW doubles in [0, 1].
Image load_image(const std::filesystem::path& path);
/// Values are clamped to [0, 1] and rounded to 8 bits.
void save_image(const std::filesystem::path& path, const Image& image);

/// Single-channel file; a pixel is set when its value is >= 128.
Mask load_mask(const std::filesystem::path& path);
void save_mask(const std::filesystem::path& path, const Mask& mask);

/// RGBA PNG with alpha = mask.
void save_rgba_patch(const std::filesystem::path& path, const Image& image, const Mask& mask);
std::pair<Image, Mask> load_rgba_patch(const std::filesystem::path& path);

/// Line plot of one or more series against iteration, written as PNG.
struct PlotSeries {
  std::string name;
  std::vector<double> values;
};
void plot_series(const std::filesystem::path& path, const std::string& title,
                 const std::vector<PlotSeries>& series);
/// Precision (y) against recall (x).
void plot_pr_curve(const std::filesystem::path& path, const std::string& title,
                   const std::vector<double>& recall, const std::vector<double>& precision);

}  // namespace badpatch

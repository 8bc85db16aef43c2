#include "badpatch/image_io.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "badpatch/error.hpp"

namespace badpatch {

namespace {

void ensure_parent(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_or_throw(const std::filesystem::path& path, const cv::Mat& mat) {
  ensure_parent(path);
  if (!cv::imwrite(path.string(), mat)) throw std::runtime_error("cannot write image " + path.string());
}

Image from_bgr(const cv::Mat& bgr) {
  Image out(Shape{3, bgr.rows, bgr.cols});
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      for (int c = 0; c < 3; ++c) out(c, y, x) = row[x][2 - c] / 255.0;
    }
  }
  return out;
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (mat.empty()) throw ConfigError("cannot read image " + path.string());
  return from_bgr(mat);
}

void save_image(const std::filesystem::path& path, const Image& image) {
  if (image.shape().channels != 3) throw std::invalid_argument("save_image: expected RGB");
  const int h = image.shape().height;
  const int w = image.shape().width;
  cv::Mat mat(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    auto* row = mat.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) row[x][2 - c] = to_byte(image(c, y, x));
    }
  }
  write_or_throw(path, mat);
}

Mask load_mask(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (mat.empty()) throw ConfigError("cannot read mask " + path.string());
  Mask out(mat.rows, mat.cols);
  for (int y = 0; y < mat.rows; ++y) {
    for (int x = 0; x < mat.cols; ++x) out.set(y, x, mat.at<std::uint8_t>(y, x) >= 128);
  }
  return out;
}

void save_mask(const std::filesystem::path& path, const Mask& mask) {
  cv::Mat mat(mask.height(), mask.width(), CV_8UC1);
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) mat.at<std::uint8_t>(y, x) = mask(y, x) ? 255 : 0;
  }
  write_or_throw(path, mat);
}

void save_rgba_patch(const std::filesystem::path& path, const Image& image, const Mask& mask) {
  const int h = image.shape().height;
  const int w = image.shape().width;
  if (image.shape().channels != 3 || mask.height() != h || mask.width() != w) {
    throw std::invalid_argument("save_rgba_patch: image and mask must agree");
  }
  cv::Mat mat(h, w, CV_8UC4);
  for (int y = 0; y < h; ++y) {
    auto* row = mat.ptr<cv::Vec4b>(y);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) row[x][2 - c] = to_byte(image(c, y, x));
      row[x][3] = mask(y, x) ? 255 : 0;
    }
  }
  write_or_throw(path, mat);
}

std::pair<Image, Mask> load_rgba_patch(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw ConfigError("cannot read patch " + path.string());
  if (mat.depth() != CV_8U) throw ConfigError(path.string() + ": expected an 8-bit image");
  Mask mask(mat.rows, mat.cols, true);
  if (mat.channels() == 4) {
    for (int y = 0; y < mat.rows; ++y) {
      for (int x = 0; x < mat.cols; ++x) mask.set(y, x, mat.at<cv::Vec4b>(y, x)[3] >= 128);
    }
    cv::cvtColor(mat, mat, cv::COLOR_BGRA2BGR);
  } else if (mat.channels() == 1) {
    cv::cvtColor(mat, mat, cv::COLOR_GRAY2BGR);
  }
  return {from_bgr(mat), mask};
}

namespace {

const cv::Scalar kPalette[] = {{200, 90, 30}, {40, 40, 220}, {40, 160, 40}, {160, 60, 160}};

struct Frame {
  cv::Mat canvas;
  cv::Rect area;
};

Frame make_frame(const std::string& title) {
  Frame f;
  f.canvas = cv::Mat(360, 560, CV_8UC3, cv::Scalar(255, 255, 255));
  f.area = cv::Rect(60, 40, 470, 270);
  cv::rectangle(f.canvas, f.area, cv::Scalar(0, 0, 0), 1);
  cv::putText(f.canvas, title, {60, 25}, cv::FONT_HERSHEY_SIMPLEX, 0.5, {0, 0, 0}, 1, cv::LINE_AA);
  return f;
}

void label(cv::Mat& canvas, const std::string& text, cv::Point at) {
  cv::putText(canvas, text, at, cv::FONT_HERSHEY_SIMPLEX, 0.35, {60, 60, 60}, 1, cv::LINE_AA);
}

std::string short_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

}  // namespace

void plot_series(const std::filesystem::path& path, const std::string& title,
                 const std::vector<PlotSeries>& series) {
  Frame f = make_frame(title);
  double lo = INFINITY, hi = -INFINITY;
  std::size_t longest = 1;
  for (const auto& s : series) {
    for (double v : s.values) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    longest = std::max(longest, s.values.size());
  }
  if (!(lo <= hi)) lo = 0.0, hi = 1.0;
  if (hi - lo < 1e-12) hi = lo + 1.0;
  auto to_px = [&](std::size_t i, double v) {
    const double fx = longest > 1 ? static_cast<double>(i) / static_cast<double>(longest - 1) : 0.0;
    const double fy = (v - lo) / (hi - lo);
    return cv::Point(f.area.x + static_cast<int>(fx * f.area.width),
                     f.area.y + f.area.height - static_cast<int>(fy * f.area.height));
  };
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const cv::Scalar colour = kPalette[k % std::size(kPalette)];
    for (std::size_t i = 1; i < s.values.size(); ++i) {
      if (!std::isfinite(s.values[i - 1]) || !std::isfinite(s.values[i])) continue;
      cv::line(f.canvas, to_px(i - 1, s.values[i - 1]), to_px(i, s.values[i]), colour, 1, cv::LINE_AA);
    }
    cv::putText(f.canvas, s.name, {f.area.x + 10, f.area.y + 15 + 14 * static_cast<int>(k)},
                cv::FONT_HERSHEY_SIMPLEX, 0.4, colour, 1, cv::LINE_AA);
  }
  label(f.canvas, short_number(hi), {5, f.area.y + 10});
  label(f.canvas, short_number(lo), {5, f.area.y + f.area.height});
  label(f.canvas, "0", {f.area.x, f.area.y + f.area.height + 15});
  label(f.canvas, std::to_string(longest - 1), {f.area.x + f.area.width - 20, f.area.y + f.area.height + 15});
  label(f.canvas, "iteration", {f.area.x + f.area.width / 2 - 20, f.area.y + f.area.height + 30});
  write_or_throw(path, f.canvas);
}

void plot_pr_curve(const std::filesystem::path& path, const std::string& title,
                   const std::vector<double>& recall, const std::vector<double>& precision) {
  Frame f = make_frame(title);
  auto to_px = [&](double r, double p) {
    return cv::Point(f.area.x + static_cast<int>(r * f.area.width),
                     f.area.y + f.area.height - static_cast<int>(p * f.area.height));
  };
  for (std::size_t i = 1; i < std::min(recall.size(), precision.size()); ++i) {
    cv::line(f.canvas, to_px(recall[i - 1], precision[i - 1]), to_px(recall[i], precision[i]),
             kPalette[0], 1, cv::LINE_AA);
  }
  label(f.canvas, "1", {45, f.area.y + 10});
  label(f.canvas, "0", {45, f.area.y + f.area.height});
  label(f.canvas, "recall", {f.area.x + f.area.width / 2 - 15, f.area.y + f.area.height + 25});
  label(f.canvas, "precision", {5, f.area.y - 5});
  write_or_throw(path, f.canvas);
}

}  // namespace badpatch

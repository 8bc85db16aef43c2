#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace badpatch {

/// Channel-major 3-D extent used for latents, images and embeddings.
struct Shape {
  int channels = 0;
  int height = 0;
  int width = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  bool operator==(const Shape&) const = default;
};

/// Dense CHW tensor of doubles. Value type; copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(int c, int y, int x) { return data_[index(c, y, x)]; }
  double operator()(int c, int y, int x) const { return data_[index(c, y, x)]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * shape_.height + static_cast<std::size_t>(y)) *
               shape_.width +
           static_cast<std::size_t>(x);
  }

  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(double scale);

  void fill(double value);
  double l2_norm() const;
  double max_abs() const;
  bool all_finite() const;

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_{};
  std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double scale);
Tensor operator*(double scale, Tensor a);

/// a*x + b*y, shapes must agree.
Tensor lincomb(double a, const Tensor& x, double b, const Tensor& y);
double dot(const Tensor& a, const Tensor& b);
/// ||a - b||_2 / ||reference||_2; falls back to the absolute norm when the reference is zero.
double relative_error(const Tensor& a, const Tensor& b, const Tensor& reference);

/// RGB image in CHW layout with values nominally in [0, 1].
using Image = Tensor;

/// Binary H x W mask.
class Mask {
 public:
  Mask() = default;
  Mask(int height, int width, bool fill = false);

  int height() const { return height_; }
  int width() const { return width_; }
  bool empty() const { return cells_.empty(); }

  bool operator()(int y, int x) const { return cells_[static_cast<std::size_t>(y) * width_ + x] != 0; }
  void set(int y, int x, bool on) { cells_[static_cast<std::size_t>(y) * width_ + x] = on ? 1 : 0; }

  std::size_t count() const;
  std::span<const std::uint8_t> cells() const { return cells_; }

  bool operator==(const Mask&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> cells_;
};

/// 1 x H x W tensor of 0/1 values and back (any nonzero cell is set).
Tensor mask_to_tensor(const Mask& m);
Mask tensor_to_mask(const Tensor& t);

}  // namespace badpatch

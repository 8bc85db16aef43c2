#include "badpatch/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace badpatch {

namespace {

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) {
    throw std::invalid_argument(std::string(what) + ": tensor shape mismatch");
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.size(), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape_.size()) {
    throw std::invalid_argument("Tensor: value count does not match shape");
  }
}

Tensor& Tensor::operator+=(const Tensor& other) {
  require_same_shape(shape_, other.shape_, "operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  require_same_shape(shape_, other.shape_, "operator-=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double scale) {
  for (auto& v : data_) v *= scale;
  return *this;
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

double Tensor::l2_norm() const {
  double sum = 0.0;
  for (double v : data_) sum += v * v;
  return std::sqrt(sum);
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double scale) { return a *= scale; }
Tensor operator*(double scale, Tensor a) { return a *= scale; }

Tensor lincomb(double a, const Tensor& x, double b, const Tensor& y) {
  require_same_shape(x.shape(), y.shape(), "lincomb");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x[i] + b * y[i];
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a.shape(), b.shape(), "dot");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += a[i] * b[i];
  return sum;
}

double relative_error(const Tensor& a, const Tensor& b, const Tensor& reference) {
  const double diff = (a - b).l2_norm();
  const double ref = reference.l2_norm();
  return ref > 0.0 ? diff / ref : diff;
}

Mask::Mask(int height, int width, bool fill)
    : height_(height), width_(width),
      cells_(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill ? 1 : 0) {
  if (height < 0 || width < 0) throw std::invalid_argument("Mask: negative extent");
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(cells_.begin(), cells_.end(), std::uint8_t{1}));
}

Tensor mask_to_tensor(const Mask& m) {
  Tensor t(Shape{1, m.height(), m.width()});
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) t(0, y, x) = m(y, x) ? 1.0 : 0.0;
  }
  return t;
}

Mask tensor_to_mask(const Tensor& t) {
  Mask m(t.shape().height, t.shape().width);
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) m.set(y, x, t(0, y, x) != 0.0);
  }
  return m;
}

}  // namespace badpatch

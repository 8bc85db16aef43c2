#include "badpatch/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace badpatch {

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(lr >= 0.0)) throw std::invalid_argument("Adam: learning rate must be >= 0");
}

Tensor Adam::step(const Tensor& grad) {
  if (state_.t == 0 || !(state_.m.shape() == grad.shape())) {
    state_.m = Tensor(grad.shape());
    state_.v = Tensor(grad.shape());
    state_.t = 0;
  }
  ++state_.t;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(state_.t));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.t));
  Tensor out(grad.shape());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double g = grad[i];
    state_.m[i] = beta1_ * state_.m[i] + (1.0 - beta1_) * g;
    state_.v[i] = beta2_ * state_.v[i] + (1.0 - beta2_) * g * g;
    out[i] = lr_ * (state_.m[i] / c1) / (std::sqrt(state_.v[i] / c2) + eps_);
  }
  return out;
}

}  // namespace badpatch

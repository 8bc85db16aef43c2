#pragma once

#include <cstdint>

#include "badpatch/tensor.hpp"

namespace badpatch {

/// Moment estimates of an Adam optimizer; persisted in checkpoints.
struct AdamState {
  Tensor m;
  Tensor v;
  std::int64_t t = 0;
};

/// Adam with bias correction. step() returns the update to subtract.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Consumes a gradient and returns lr * m_hat / (sqrt(v_hat) + eps).
  Tensor step(const Tensor& grad);

  double lr() const { return lr_; }
  const AdamState& state() const { return state_; }
  void set_state(AdamState state) { state_ = std::move(state); }
  void reset() { state_ = {}; }

 private:
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  AdamState state_;
};

}  // namespace badpatch

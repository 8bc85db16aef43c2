#include "badpatch/losses.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

#include "badpatch/error.hpp"

namespace badpatch {

LossKind parse_loss_kind(std::string_view name) {
  if (name == "iou_detection" || name == "iou") return LossKind::iou_detection;
  if (name == "common_detection" || name == "common") return LossKind::common_detection;
  throw ConfigError("unknown loss kind '" + std::string(name) + "'");
}

std::string_view to_string(LossKind kind) {
  return kind == LossKind::iou_detection ? "iou_detection" : "common_detection";
}

void LossConfig::validate() const {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) {
    throw ConfigError("loss: iou_threshold must lie in (0, 1)");
  }
  if (target_class < 0) throw ConfigError("loss: target_class must be >= 0");
}

namespace {

DetectionGrad zero_grad(const Detection& d) {
  return DetectionGrad{0.0, std::vector<double>(d.p_cls.size(), 0.0)};
}

// Adds `weight` * dP/d(outputs) for P = p_obj * p_cls[cls].
void add_confidence_grad(const Detection& d, int cls, double weight, DetectionGrad& g) {
  if (cls < 0 || cls >= static_cast<int>(d.p_cls.size())) return;
  const auto c = static_cast<std::size_t>(cls);
  g.d_obj += weight * d.p_cls[c];
  g.d_cls[c] += weight * d.p_obj;
}

LossResult common_loss_impl(std::span<const Detections> batch, const LossConfig& config) {
  LossResult out;
  out.grads.resize(batch.size());
  if (batch.empty()) return out;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Detections& dets = batch[i];
    auto& grads = out.grads[i];
    grads.reserve(dets.size());
    for (const auto& d : dets) grads.push_back(zero_grad(d));
    if (dets.empty()) continue;
    std::size_t best = 0;
    double best_p = dets[0].confidence(config.target_class);
    for (std::size_t j = 1; j < dets.size(); ++j) {
      const double p = dets[j].confidence(config.target_class);
      if (p > best_p) {
        best_p = p;
        best = j;
      }
    }
    out.value += best_p;
    add_confidence_grad(dets[best], config.target_class, inv_n, grads[best]);
  }
  out.value /= static_cast<double>(batch.size());
  return out;
}

LossResult iou_loss_impl(std::span<const Detections> batch, std::span<const std::vector<Box>> gt,
                         const LossConfig& config) {
  if (batch.size() != gt.size()) {
    throw std::invalid_argument("iou_detection_loss: batch and ground-truth lengths differ");
  }
  LossResult out;
  out.grads.resize(batch.size());
  if (batch.empty()) return out;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Detections& dets = batch[i];
    auto& grads = out.grads[i];
    grads.reserve(dets.size());
    kept.clear();
    for (std::size_t k = 0; k < dets.size(); ++k) {
      grads.push_back(zero_grad(dets[k]));
      double best_iou = 0.0;
      for (const Box& g : gt[i]) best_iou = std::max(best_iou, iou(g, dets[k].box));
      if (best_iou > config.iou_threshold) kept.push_back(k);
    }
    if (kept.empty()) continue;
    const double weight = inv_n / static_cast<double>(kept.size());
    double sum = 0.0;
    for (std::size_t k : kept) {
      sum += dets[k].confidence(config.target_class);
      add_confidence_grad(dets[k], config.target_class, weight, grads[k]);
    }
    out.value += sum / static_cast<double>(kept.size());
  }
  out.value /= static_cast<double>(batch.size());
  return out;
}

}  // namespace

double common_detection_loss(std::span<const Detections> batch, const LossConfig& config) {
  return common_loss_impl(batch, config).value;
}

double iou_detection_loss(std::span<const Detections> batch, std::span<const std::vector<Box>> gt,
                          const LossConfig& config) {
  return iou_loss_impl(batch, gt, config).value;
}

LossResult detection_loss(std::span<const Detections> batch, std::span<const std::vector<Box>> gt,
                          const LossConfig& config) {
  return config.kind == LossKind::iou_detection ? iou_loss_impl(batch, gt, config)
                                                : common_loss_impl(batch, config);
}

}  // namespace badpatch

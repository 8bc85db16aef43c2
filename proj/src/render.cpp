#include "badpatch/render.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <spdlog/spdlog.h>

#include "badpatch/error.hpp"

namespace badpatch {

void PatchSpec::validate() const {
  const Shape& s = reference_image.shape();
  if (s.channels != 3 || s.height < 1 || s.width < 1) {
    throw ConfigError("patch spec: reference image must be a non-empty RGB image");
  }
  if (mask.height() != s.height || mask.width() != s.width) {
    throw ConfigError("patch spec: mask size does not match the reference image");
  }
  if (mask.count() == 0) throw ConfigError("patch spec: mask is empty");
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("patch spec: tau must lie in (0, 1)");
  for (double c : background) {
    if (!(c >= 0.0 && c <= 1.0)) throw ConfigError("patch spec: background colour outside [0, 1]");
  }
}

void TrainingSet::validate() const {
  if (images.size() != person_boxes.size()) {
    throw ConfigError("training set: one box list per image required");
  }
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Shape& s = images[i].shape();
    if (s.channels != 3) throw ConfigError("training set: images must be RGB");
    for (const Box& b : person_boxes[i]) {
      if (!(b.w > 0 && b.h > 0 && b.x >= 0 && b.y >= 0 && b.x + b.w <= s.width &&
            b.y + b.h <= s.height)) {
        throw ConfigError("training set: box outside image " + std::to_string(i));
      }
    }
  }
}

Image apply_background(const PatchSpec& spec) {
  const Shape& s = spec.reference_image.shape();
  if (spec.mask.height() != s.height || spec.mask.width() != s.width) {
    throw ConfigError("apply_background: mask size does not match the image");
  }
  Image out = spec.reference_image;
  for (int c = 0; c < s.channels; ++c) {
    for (int y = 0; y < s.height; ++y) {
      for (int x = 0; x < s.width; ++x) {
        if (!spec.mask(y, x)) out(c, y, x) = spec.background[static_cast<std::size_t>(c % 3)];
      }
    }
  }
  return out;
}

Mask downsample_mask(const Mask& mask, int factor) {
  if (factor < 1) throw ConfigError("downsample_mask: factor must be >= 1");
  const int h = (mask.height() + factor - 1) / factor;
  const int w = (mask.width() + factor - 1) / factor;
  Mask out(h, w);
  const int block = factor * factor;
  for (int by = 0; by < h; ++by) {
    for (int bx = 0; bx < w; ++bx) {
      int ones = 0;
      for (int y = by * factor; y < std::min((by + 1) * factor, mask.height()); ++y) {
        for (int x = bx * factor; x < std::min((bx + 1) * factor, mask.width()); ++x) {
          ones += mask(y, x) ? 1 : 0;
        }
      }
      out.set(by, bx, 2 * ones >= block);
    }
  }
  return out;
}

Mask upsample_mask(const Mask& mask, int factor) {
  if (factor < 1) throw ConfigError("upsample_mask: factor must be >= 1");
  Mask out(mask.height() * factor, mask.width() * factor);
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) out.set(y, x, mask(y / factor, x / factor));
  }
  return out;
}

bool AugmentConfig::is_identity() const {
  return max_rotation_deg == 0.0 && brightness == 0.0 && contrast_min == 1.0 &&
         contrast_max == 1.0 && jitter == 0.0;
}

void AugmentConfig::validate() const {
  if (!(max_rotation_deg >= 0.0 && max_rotation_deg <= 180.0)) {
    throw ConfigError("augment: rotation must lie in [0, 180] degrees");
  }
  if (!(brightness >= 0.0 && brightness <= 1.0)) throw ConfigError("augment: brightness must lie in [0, 1]");
  if (!(contrast_min > 0.0 && contrast_min <= contrast_max)) {
    throw ConfigError("augment: need 0 < contrast_min <= contrast_max");
  }
  if (!(jitter >= 0.0 && jitter < 0.5)) throw ConfigError("augment: jitter must lie in [0, 0.5)");
}

AugmentConfig AugmentConfig::from_json(const nlohmann::json& j) {
  AugmentConfig a;
  a.max_rotation_deg = j.value("max_rotation_deg", a.max_rotation_deg);
  a.brightness = j.value("brightness", a.brightness);
  a.contrast_min = j.value("contrast_min", a.contrast_min);
  a.contrast_max = j.value("contrast_max", a.contrast_max);
  a.jitter = j.value("jitter", a.jitter);
  a.validate();
  return a;
}

nlohmann::json AugmentConfig::to_json() const {
  return {{"max_rotation_deg", max_rotation_deg}, {"brightness", brightness},
          {"contrast_min", contrast_min},         {"contrast_max", contrast_max},
          {"jitter", jitter}};
}

PatchTransform sample_transform(const AugmentConfig& aug, std::mt19937_64& rng) {
  auto uniform = [&](double lo, double hi) {
    if (lo == hi) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  PatchTransform t;
  t.rotation_rad = uniform(-aug.max_rotation_deg, aug.max_rotation_deg) * std::numbers::pi / 180.0;
  t.brightness = uniform(-aug.brightness, aug.brightness);
  t.contrast = uniform(aug.contrast_min, aug.contrast_max);
  t.jitter_x = uniform(-aug.jitter, aug.jitter);
  t.jitter_y = uniform(-aug.jitter, aug.jitter);
  return t;
}

double patch_scale(const Box& box, const Mask& patch_mask, double tau) {
  const std::size_t count = patch_mask.count();
  if (count == 0) return 0.0;
  return tau * std::sqrt(box.w * box.h) / std::sqrt(static_cast<double>(count));
}

Image apply_patch(const Image& image, const Box& box, const Image& patch_image,
                  const Mask& patch_mask, double tau, const PatchTransform& transform,
                  PatchTrace* trace) {
  const Shape& ps = patch_image.shape();
  if (ps.channels != 3 || patch_mask.height() != ps.height || patch_mask.width() != ps.width) {
    throw ConfigError("apply_patch: patch image and mask must be RGB and the same size");
  }
  if (image.shape().channels != 3) throw ConfigError("apply_patch: image must be RGB");
  if (!(box.w > 0 && box.h > 0)) throw ConfigError("apply_patch: degenerate person box");
  if (trace != nullptr) {
    *trace = PatchTrace{};
    trace->patch_shape = ps;
    trace->contrast = transform.contrast;
  }
  Image out = image;
  if (patch_mask.count() == 0) return out;

  double s = patch_scale(box, patch_mask, tau);
  const double fit = std::min(box.w / ps.width, box.h / ps.height);
  if (s > fit) {
    spdlog::warn("apply_patch: scaled patch exceeds the person box; clamping scale {:.3f} -> {:.3f}",
                 s, fit);
    s = fit;
  }
  if (trace != nullptr) trace->scale = s;

  const double cx = box.x + 0.5 * box.w + transform.jitter_x * box.w;
  const double cy = box.y + 0.35 * box.h + transform.jitter_y * box.h;
  const double cs = std::cos(transform.rotation_rad);
  const double sn = std::sin(transform.rotation_rad);
  const bool photometric_identity = transform.contrast == 1.0 && transform.brightness == 0.0;
  const double radius = 0.5 * s * std::hypot(ps.width, ps.height) + 1.0;
  const int h = image.shape().height;
  const int w = image.shape().width;
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + radius)));
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + radius)));

  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      // Inverse map the output pixel centre into patch coordinates.
      const double dx = x + 0.5 - cx;
      const double dy = y + 0.5 - cy;
      const double u = (cs * dx + sn * dy) / s + 0.5 * ps.width;
      const double v = (-sn * dx + cs * dy) / s + 0.5 * ps.height;
      if (u < 0.0 || v < 0.0 || u >= ps.width || v >= ps.height) continue;
      const int mu = std::min(static_cast<int>(u), ps.width - 1);
      const int mv = std::min(static_cast<int>(v), ps.height - 1);
      if (!patch_mask(mv, mu)) continue;

      // Bilinear weights between neighbouring pixel centres, clamped at the border.
      const double fu = u - 0.5;
      const double fv = v - 0.5;
      const int ua = static_cast<int>(std::floor(fu));
      const int va = static_cast<int>(std::floor(fv));
      const double tu = fu - ua;
      const double tv = fv - va;
      const int u_lo = std::clamp(ua, 0, ps.width - 1);
      const int u_hi = std::clamp(ua + 1, 0, ps.width - 1);
      const int v_lo = std::clamp(va, 0, ps.height - 1);
      const int v_hi = std::clamp(va + 1, 0, ps.height - 1);
      const std::array<std::size_t, 4> src = {
          static_cast<std::size_t>(v_lo * ps.width + u_lo), static_cast<std::size_t>(v_lo * ps.width + u_hi),
          static_cast<std::size_t>(v_hi * ps.width + u_lo), static_cast<std::size_t>(v_hi * ps.width + u_hi)};
      const std::array<double, 4> wt = {(1 - tu) * (1 - tv), tu * (1 - tv), (1 - tu) * tv, tu * tv};

      PatchTrace::Pixel rec;
      rec.y = y;
      rec.x = x;
      rec.src = src;
      rec.weight = wt;
      const std::size_t plane = static_cast<std::size_t>(ps.height) * ps.width;
      for (int c = 0; c < 3; ++c) {
        const auto off = static_cast<std::size_t>(c) * plane;
        double val = 0.0;
        for (int k = 0; k < 4; ++k) {
          if (wt[static_cast<std::size_t>(k)] != 0.0) {
            val += wt[static_cast<std::size_t>(k)] * patch_image[off + src[static_cast<std::size_t>(k)]];
          }
        }
        const double adjusted = photometric_identity
                                    ? val
                                    : (val - 0.5) * transform.contrast + 0.5 + transform.brightness;
        rec.pass[static_cast<std::size_t>(c)] = adjusted > 0.0 && adjusted < 1.0;
        out(c, y, x) = std::clamp(adjusted, 0.0, 1.0);
      }
      if (trace != nullptr) trace->pixels.push_back(rec);
    }
  }
  return out;
}

void apply_patch_backward(const PatchTrace& trace, Image& image_grad, Image& patch_grad) {
  const Shape& ps = trace.patch_shape;
  if (!(patch_grad.shape() == ps)) throw std::invalid_argument("apply_patch_backward: patch gradient shape");
  const std::size_t plane = static_cast<std::size_t>(ps.height) * ps.width;
  for (const auto& px : trace.pixels) {
    for (int c = 0; c < 3; ++c) {
      double& g_out = image_grad(c, px.y, px.x);
      if (px.pass[static_cast<std::size_t>(c)]) {
        const double g = g_out * trace.contrast;
        const auto off = static_cast<std::size_t>(c) * plane;
        for (int k = 0; k < 4; ++k) {
          patch_grad[off + px.src[static_cast<std::size_t>(k)]] += g * px.weight[static_cast<std::size_t>(k)];
        }
      }
      g_out = 0.0;
    }
  }
}

}  // namespace badpatch

#include "badpatch/toy_detector.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "badpatch/hash.hpp"

namespace badpatch {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Summed-area table with a zero first row/column: (h+1) x (w+1).
std::vector<double> summed_area(const std::vector<double>& map, int height, int width) {
  const int stride = width + 1;
  std::vector<double> sat(static_cast<std::size_t>((height + 1) * stride), 0.0);
  for (int y = 0; y < height; ++y) {
    double row = 0.0;
    for (int x = 0; x < width; ++x) {
      row += map[static_cast<std::size_t>(y * width + x)];
      sat[static_cast<std::size_t>((y + 1) * stride + x + 1)] =
          sat[static_cast<std::size_t>(y * stride + x + 1)] + row;
    }
  }
  return sat;
}

// Per-pixel redness and gradient energy.
void pixel_maps(const Image& image, std::vector<double>& red, std::vector<double>& tex) {
  const int h = image.shape().height;
  const int w = image.shape().width;
  red.assign(static_cast<std::size_t>(h * w), 0.0);
  tex.assign(static_cast<std::size_t>(h * w), 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto p = static_cast<std::size_t>(y * w + x);
      red[p] = image(0, y, x) - 0.5 * (image(1, y, x) + image(2, y, x));
      double e = 0.0;
      for (int c = 0; c < 3; ++c) {
        if (x + 1 < w) {
          const double d = image(c, y, x + 1) - image(c, y, x);
          e += d * d;
        }
        if (y + 1 < h) {
          const double d = image(c, y + 1, x) - image(c, y, x);
          e += d * d;
        }
      }
      tex[p] = e;
    }
  }
}

}  // namespace

ToyDetectorParams ToyDetectorParams::from_json(const nlohmann::json& j) {
  ToyDetectorParams p;
  p.seed = j.value("seed", p.seed);
  p.stride = j.value("stride", p.stride);
  if (j.contains("anchors")) p.anchors = j.at("anchors").get<std::vector<std::array<int, 2>>>();
  p.min_visible = j.value("min_visible", p.min_visible);
  p.obj_bias = j.value("obj_bias", p.obj_bias);
  p.w_box = j.value("w_box", p.w_box);
  p.w_core = j.value("w_core", p.w_core);
  p.w_ring = j.value("w_ring", p.w_ring);
  p.w_texture = j.value("w_texture", p.w_texture);
  p.w_head = j.value("w_head", p.w_head);
  p.w_legs = j.value("w_legs", p.w_legs);
  p.cls_bias = j.value("cls_bias", p.cls_bias);
  p.c_core = j.value("c_core", p.c_core);
  p.c_texture = j.value("c_texture", p.c_texture);
  p.jitter = j.value("jitter", p.jitter);
  p.confidence_threshold = j.value("confidence_threshold", p.confidence_threshold);
  p.nms_iou = j.value("nms_iou", p.nms_iou);
  if (p.stride < 1 || p.anchors.empty()) throw ConfigError("toy-detector: bad anchor grid");
  for (const auto& a : p.anchors) {
    if (a[0] < 2 || a[1] < 2) throw ConfigError("toy-detector: anchors must be at least 2x2");
  }
  return p;
}

nlohmann::json ToyDetectorParams::to_json() const {
  return {{"seed", seed},         {"stride", stride},       {"anchors", anchors},
          {"min_visible", min_visible}, {"obj_bias", obj_bias}, {"w_box", w_box},
          {"w_core", w_core},     {"w_ring", w_ring},       {"w_texture", w_texture}, {"w_head", w_head}, {"w_legs", w_legs},
          {"cls_bias", cls_bias}, {"c_core", c_core},       {"c_texture", c_texture},
          {"jitter", jitter},     {"confidence_threshold", confidence_threshold},
          {"nms_iou", nms_iou}};
}

ToyDetector::ToyDetector(ToyDetectorParams params) : params_(std::move(params)) {}

ToyDetector::Weights ToyDetector::anchor_weights(int cx, int cy, std::size_t shape) const {
  const auto cell = (static_cast<std::uint64_t>(cy) << 32) | static_cast<std::uint32_t>(cx);
  const std::uint64_t base = mix_seed(params_.seed, shape, cell);
  std::uint64_t draw = 0;
  auto uniform = [&] {
    return (static_cast<double>(mix_seed(base, draw++) >> 11) + 0.5) * 0x1.0p-53;
  };
  auto jittered = [&](double w) {
    const double n = std::sqrt(-2.0 * std::log(uniform())) * std::cos(2.0 * std::numbers::pi * uniform());
    return w * (1.0 + params_.jitter * n);
  };
  Weights wt{};
  wt.obj_bias = jittered(params_.obj_bias);
  wt.w_box = jittered(params_.w_box);
  wt.w_core = jittered(params_.w_core);
  wt.w_ring = jittered(params_.w_ring);
  wt.w_texture = jittered(params_.w_texture);
  wt.w_head = jittered(params_.w_head);
  wt.w_legs = jittered(params_.w_legs);
  wt.cls_bias = jittered(params_.cls_bias);
  wt.c_core = jittered(params_.c_core);
  wt.c_texture = jittered(params_.c_texture);
  return wt;
}

std::vector<ToyDetector::Anchor> ToyDetector::anchors_for(int height, int width) const {
  auto clip = [&](int x0, int y0, int x1, int y1) {
    Rect r;
    r.x0 = std::clamp(x0, 0, width);
    r.x1 = std::clamp(x1, 0, width);
    r.y0 = std::clamp(y0, 0, height);
    r.y1 = std::clamp(y1, 0, height);
    return r;
  };
  std::vector<Anchor> out;
  const int half = params_.stride / 2;
  for (int cy = half; cy < height; cy += params_.stride) {
    for (int cx = half; cx < width; cx += params_.stride) {
      for (std::size_t si = 0; si < params_.anchors.size(); ++si) {
        const auto [aw, ah] = params_.anchors[si];
        const int ax = cx - aw / 2;
        const int ay = cy - ah / 2;
        Anchor a;
        a.box = clip(ax, ay, ax + aw, ay + ah);
        if (a.box.area() < params_.min_visible * aw * ah) continue;
        a.wt = anchor_weights(cx, cy, si);
        a.core = clip(ax + static_cast<int>(std::lround(0.2 * aw)),
                      ay + static_cast<int>(std::lround(0.1 * ah)),
                      ax + static_cast<int>(std::lround(0.8 * aw)),
                      ay + static_cast<int>(std::lround(0.65 * ah)));
        a.head = clip(ax, ay, ax + aw, ay + static_cast<int>(std::lround(0.15 * ah)));
        a.legs = clip(ax, ay + static_cast<int>(std::lround(0.65 * ah)), ax + aw, ay + ah);
        const int mx = static_cast<int>(std::lround(0.25 * aw));
        const int my = static_cast<int>(std::lround(0.25 * ah));
        a.outer = clip(ax - mx, ay - my, ax + aw + mx, ay + ah + my);
        out.push_back(a);
      }
    }
  }
  return out;
}

ToyDetector::Features ToyDetector::features(const Anchor& a, const std::vector<double>& red_sat,
                                            const std::vector<double>& tex_sat, int width) const {
  const int stride = width + 1;
  auto rect_sum = [&](const std::vector<double>& sat, const Rect& r) {
    auto at = [&](int y, int x) { return sat[static_cast<std::size_t>(y * stride + x)]; };
    return at(r.y1, r.x1) - at(r.y0, r.x1) - at(r.y1, r.x0) + at(r.y0, r.x0);
  };
  Features f;
  const double box_area = a.box.area();
  const double core_area = a.core.area();
  const double ring_area = a.outer.area() - box_area;
  const double box_sum = rect_sum(red_sat, a.box);
  if (box_area > 0) f.box_red = box_sum / box_area;
  if (core_area > 0) {
    f.core_red = rect_sum(red_sat, a.core) / core_area;
    f.core_texture = rect_sum(tex_sat, a.core) / core_area;
  }
  if (a.head.area() > 0) f.head_red = rect_sum(red_sat, a.head) / a.head.area();
  if (a.legs.area() > 0) f.legs_red = rect_sum(red_sat, a.legs) / a.legs.area();
  if (ring_area > 0) f.ring_red = (rect_sum(red_sat, a.outer) - box_sum) / ring_area;
  return f;
}

double ToyDetector::obj_logit(const Weights& wt, const Features& f) {
  return wt.obj_bias + wt.w_box * f.box_red + wt.w_core * f.core_red -
         wt.w_ring * f.ring_red - wt.w_head * f.head_red -
         wt.w_legs * f.legs_red -
         wt.w_texture * f.core_texture;
}

double ToyDetector::cls_logit(const Weights& wt, const Features& f) {
  return wt.cls_bias + wt.c_core * f.core_red - wt.c_texture * f.core_texture;
}

Detections ToyDetector::detect_raw(const Image& image) const {
  if (image.shape().channels != 3) throw BackendError("toy-detector: expected an RGB image");
  const int h = image.shape().height;
  const int w = image.shape().width;
  std::vector<double> red, tex;
  pixel_maps(image, red, tex);
  const auto red_sat = summed_area(red, h, w);
  const auto tex_sat = summed_area(tex, h, w);

  const auto anchors = anchors_for(h, w);
  Detections out;
  out.reserve(anchors.size());
  for (const auto& a : anchors) {
    const Features f = features(a, red_sat, tex_sat, w);
    const Weights& wt = a.wt;
    const double person = sigmoid(cls_logit(wt, f));
    Detection d;
    d.box = Box{static_cast<double>(a.box.x0), static_cast<double>(a.box.y0),
                static_cast<double>(a.box.x1 - a.box.x0), static_cast<double>(a.box.y1 - a.box.y0)};
    d.p_obj = sigmoid(obj_logit(wt, f));
    d.p_cls = {person, 1.0 - person};
    out.push_back(std::move(d));
  }
  return out;
}

Image ToyDetector::backward(const Image& image, std::span<const DetectionGrad> grads) const {
  if (image.shape().channels != 3) throw BackendError("toy-detector: expected an RGB image");
  const int h = image.shape().height;
  const int w = image.shape().width;
  std::vector<double> red, tex;
  pixel_maps(image, red, tex);
  const auto red_sat = summed_area(red, h, w);
  const auto tex_sat = summed_area(tex, h, w);
  const auto anchors = anchors_for(h, w);
  if (grads.size() != anchors.size()) {
    throw BackendError("toy-detector: gradient count does not match candidate count");
  }

  // Difference arrays for d(loss)/d(red) and d(loss)/d(tex); (h+1) x (w+1).
  const int stride = w + 1;
  std::vector<double> d_red(static_cast<std::size_t>((h + 1) * stride), 0.0);
  std::vector<double> d_tex(d_red.size(), 0.0);
  auto rect_add = [&](std::vector<double>& diff, const Rect& r, double v) {
    if (r.area() <= 0) return;
    diff[static_cast<std::size_t>(r.y0 * stride + r.x0)] += v;
    diff[static_cast<std::size_t>(r.y0 * stride + r.x1)] -= v;
    diff[static_cast<std::size_t>(r.y1 * stride + r.x0)] -= v;
    diff[static_cast<std::size_t>(r.y1 * stride + r.x1)] += v;
  };

  for (std::size_t k = 0; k < anchors.size(); ++k) {
    const DetectionGrad& g = grads[k];
    const double d_person = (g.d_cls.size() > 0 ? g.d_cls[0] : 0.0) -
                            (g.d_cls.size() > 1 ? g.d_cls[1] : 0.0);
    if (g.d_obj == 0.0 && d_person == 0.0) continue;
    const Anchor& a = anchors[k];
    const Features f = features(a, red_sat, tex_sat, w);
    const Weights& wt = a.wt;
    const double p = sigmoid(obj_logit(wt, f));
    const double q = sigmoid(cls_logit(wt, f));
    const double d_obj_logit = g.d_obj * p * (1.0 - p);
    const double d_cls_logit = d_person * q * (1.0 - q);

    const double d_box_red = wt.w_box * d_obj_logit;
    const double d_core_red = wt.w_core * d_obj_logit + wt.c_core * d_cls_logit;
    const double d_ring_red = -wt.w_ring * d_obj_logit;
    const double d_head_red = -wt.w_head * d_obj_logit;
    const double d_legs_red = -wt.w_legs * d_obj_logit;
    const double d_core_tex = -wt.w_texture * d_obj_logit - wt.c_texture * d_cls_logit;

    const double box_area = a.box.area();
    const double core_area = a.core.area();
    const double ring_area = a.outer.area() - box_area;
    if (box_area > 0) rect_add(d_red, a.box, d_box_red / box_area);
    if (core_area > 0) {
      rect_add(d_red, a.core, d_core_red / core_area);
      rect_add(d_tex, a.core, d_core_tex / core_area);
    }
    if (a.head.area() > 0) rect_add(d_red, a.head, d_head_red / a.head.area());
    if (a.legs.area() > 0) rect_add(d_red, a.legs, d_legs_red / a.legs.area());
    if (ring_area > 0) {
      rect_add(d_red, a.outer, d_ring_red / ring_area);
      rect_add(d_red, a.box, -d_ring_red / ring_area);
    }
  }

  // Prefix sums turn the difference arrays into per-pixel gradients.
  auto integrate = [&](std::vector<double>& diff) {
    for (int y = 0; y <= h; ++y) {
      for (int x = 0; x <= w; ++x) {
        double v = diff[static_cast<std::size_t>(y * stride + x)];
        if (x > 0) v += diff[static_cast<std::size_t>(y * stride + x - 1)];
        if (y > 0) v += diff[static_cast<std::size_t>((y - 1) * stride + x)];
        if (x > 0 && y > 0) v -= diff[static_cast<std::size_t>((y - 1) * stride + x - 1)];
        diff[static_cast<std::size_t>(y * stride + x)] = v;
      }
    }
  };
  integrate(d_red);
  integrate(d_tex);

  Image grad(image.shape());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double dr = d_red[static_cast<std::size_t>(y * stride + x)];
      grad(0, y, x) += dr;
      grad(1, y, x) -= 0.5 * dr;
      grad(2, y, x) -= 0.5 * dr;
      const double dt = d_tex[static_cast<std::size_t>(y * stride + x)];
      if (dt == 0.0) continue;
      for (int c = 0; c < 3; ++c) {
        if (x + 1 < w) {
          const double g = 2.0 * dt * (image(c, y, x + 1) - image(c, y, x));
          grad(c, y, x + 1) += g;
          grad(c, y, x) -= g;
        }
        if (y + 1 < h) {
          const double g = 2.0 * dt * (image(c, y + 1, x) - image(c, y, x));
          grad(c, y + 1, x) += g;
          grad(c, y, x) -= g;
        }
      }
    }
  }
  return grad;
}

}  // namespace badpatch

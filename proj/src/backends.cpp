#include "badpatch/backends.hpp"

#include <dlfcn.h>

#include <algorithm>
#include <filesystem>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "badpatch/losses.hpp"
#include "badpatch/toy_detector.hpp"
#include "badpatch/toy_diffusion.hpp"
#include "badpatch/toy_similarity.hpp"

namespace badpatch {

Image DetectorBackend::backward(const Image&, std::span<const DetectionGrad>) const {
  throw BackendError("detector '" + name() + "' is not differentiable");
}

std::vector<Detections> DetectorBackend::detect(std::span<const Image> images) const {
  std::vector<Detections> out(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    Detections raw = detect_raw(images[i]);
    Detections kept;
    for (auto& d : raw) {
      double best = 0.0;
      for (int c = 0; c < static_cast<int>(d.p_cls.size()); ++c) best = std::max(best, d.confidence(c));
      if (best >= confidence_threshold()) kept.push_back(std::move(d));
    }
    // Class-wise suppression keeps every class's strongest boxes.
    Detections merged;
    for (int c = 0; c < num_classes(); ++c) {
      Detections of_class;
      for (const auto& d : kept) {
        auto arg = std::max_element(d.p_cls.begin(), d.p_cls.end()) - d.p_cls.begin();
        if (arg == c) of_class.push_back(d);
      }
      for (auto& d : non_max_suppression(of_class, c, nms_iou())) merged.push_back(std::move(d));
    }
    out[i] = std::move(merged);
  }
  return out;
}

namespace {

template <typename Interface>
Registry<Interface>& make_registry() {
  static Registry<Interface> registry;
  return registry;
}

}  // namespace

Registry<DiffusionBackend>& diffusion_registry() {
  static Registry<DiffusionBackend>& registry = [] () -> Registry<DiffusionBackend>& {
    auto& r = make_registry<DiffusionBackend>();
    r.register_backend("toy-linear", [](const nlohmann::json& params) {
      return std::make_unique<ToyLinearDiffusion>(ToyDiffusionParams::from_json(params));
    });
    return r;
  }();
  return registry;
}

Registry<DetectorBackend>& detector_registry() {
  static Registry<DetectorBackend>& registry = [] () -> Registry<DetectorBackend>& {
    auto& r = make_registry<DetectorBackend>();
    r.register_backend("toy-detector", [](const nlohmann::json& params) {
      return std::make_unique<ToyDetector>(ToyDetectorParams::from_json(params));
    });
    return r;
  }();
  return registry;
}

Registry<SimilarityBackend>& similarity_registry() {
  static Registry<SimilarityBackend>& registry = [] () -> Registry<SimilarityBackend>& {
    auto& r = make_registry<SimilarityBackend>();
    r.register_backend("toy-histogram", [](const nlohmann::json& params) {
      return std::make_unique<ToyHistogramScorer>(params.value("bins", 6));
    });
    return r;
  }();
  return registry;
}

int load_plugins(const std::string& search_path) {
  using RegisterFn = void (*)();
  int loaded = 0;
  std::stringstream dirs(search_path);
  std::string dir;
  while (std::getline(dirs, dir, ':')) {
    if (dir.empty() || !std::filesystem::is_directory(dir)) continue;
    std::vector<std::filesystem::path> libs;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      if (entry.path().extension() == ".so") libs.push_back(entry.path());
    }
    std::sort(libs.begin(), libs.end());
    for (const auto& lib : libs) {
      void* handle = dlopen(lib.c_str(), RTLD_NOW | RTLD_GLOBAL);
      if (handle == nullptr) {
        spdlog::warn("plugin {}: {}", lib.string(), dlerror());
        continue;
      }
      auto fn = reinterpret_cast<RegisterFn>(dlsym(handle, "badpatch_register_plugins"));
      if (fn == nullptr) {
        spdlog::warn("plugin {}: missing badpatch_register_plugins", lib.string());
        continue;
      }
      fn();
      ++loaded;
    }
  }
  return loaded;
}

std::vector<Image> ensemble_gradient(std::span<const DetectorBackend* const> detectors,
                                     std::span<const Image> images,
                                     std::span<const std::vector<Box>> gt, const LossConfig& config) {
  if (detectors.empty()) throw ConfigError("ensemble_gradient: no detectors given");
  for (const auto* d : detectors) {
    if (d == nullptr || !d->differentiable()) {
      throw ConfigError("ensemble_gradient: every detector must be differentiable");
    }
  }
  std::vector<Image> total;
  total.reserve(images.size());
  for (const auto& img : images) total.emplace_back(img.shape());

  for (const auto* det : detectors) {
    std::vector<Detections> raw(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) raw[i] = det->detect_raw(images[i]);
    const LossResult loss = detection_loss(raw, gt, config);
    for (std::size_t i = 0; i < images.size(); ++i) {
      total[i] += det->backward(images[i], loss.grads[i]);
    }
  }
  const double inv = 1.0 / static_cast<double>(detectors.size());
  for (auto& g : total) g *= inv;
  return total;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, bool parallel) {
  const std::size_t workers =
      parallel ? std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency())) : 1;
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  }
}

}  // namespace badpatch

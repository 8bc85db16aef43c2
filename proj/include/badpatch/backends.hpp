#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "badpatch/detection.hpp"
#include "badpatch/error.hpp"
#include "badpatch/schedule.hpp"
#include "badpatch/tensor.hpp"

namespace badpatch {

/// Whether a backend tolerates parallel read-only calls.
enum class Concurrency { concurrent_read, exclusive };

/// Noise predictor, latent codec and text encoder of a latent diffusion model.
class DiffusionBackend {
 public:
  virtual ~DiffusionBackend() = default;

  virtual std::string name() const = 0;
  virtual Shape latent_shape() const = 0;
  /// Spatial pixels per latent cell (8 for SD-style VAEs).
  virtual int pixel_factor() const = 0;
  virtual int train_steps() const = 0;
  virtual Concurrency concurrency() const { return Concurrency::exclusive; }
  /// Bound on |decode(encode(x)) - x| the backend promises.
  virtual double reconstruction_tolerance() const = 0;

  virtual Tensor predict_noise(const Tensor& z, int timestep, const ConditionEmbedding& e) const = 0;
  /// Vector-Jacobian product of predict_noise with respect to the embedding.
  virtual ConditionEmbedding noise_embedding_vjp(const Tensor& z, int timestep,
                                                 const ConditionEmbedding& e,
                                                 const Tensor& upstream) const = 0;

  virtual Tensor encode_image(const Image& image) const = 0;
  virtual Image decode_latent(const Tensor& z0) const = 0;
  /// Vector-Jacobian product of decode_latent at z0.
  virtual Tensor decode_vjp(const Tensor& z0, const Image& upstream) const = 0;

  virtual ConditionEmbedding embed_text(std::string_view text) const = 0;
};

/// Object detector under attack.
///
/// detect_raw() returns every candidate in a fixed order and is the surface the
/// losses and backward() operate on. detect() is the post-processed view used
/// for evaluation (confidence threshold + NMS).
class DetectorBackend {
 public:
  virtual ~DetectorBackend() = default;

  virtual std::string name() const = 0;
  virtual int num_classes() const = 0;
  virtual bool differentiable() const = 0;
  virtual Concurrency concurrency() const { return Concurrency::exclusive; }
  virtual double confidence_threshold() const = 0;

  virtual Detections detect_raw(const Image& image) const = 0;
  /// dL/dimage given dL/d(outputs) for every raw candidate.
  virtual Image backward(const Image& image, std::span<const DetectionGrad> grads) const;

  virtual std::vector<Detections> detect(std::span<const Image> images) const;
  virtual double nms_iou() const { return 0.45; }
};

/// Embeds images and text into a common space for naturalness scoring.
class SimilarityBackend {
 public:
  virtual ~SimilarityBackend() = default;
  virtual std::string name() const = 0;
  virtual std::vector<double> embed_image(const Image& image, const Mask* mask) const = 0;
  virtual std::vector<double> embed_text(std::string_view text) const = 0;
};

/// Name -> factory table for one backend interface.
template <typename Interface>
class Registry {
 public:
  using Factory = std::function<std::unique_ptr<Interface>(const nlohmann::json& params)>;

  void register_backend(const std::string& name, Factory factory) {
    std::lock_guard lock(mutex_);
    if (!factories_.emplace(name, std::move(factory)).second) {
      throw ConfigError("backend '" + name + "' is already registered");
    }
  }

  bool contains(const std::string& name) const {
    std::lock_guard lock(mutex_);
    return factories_.count(name) != 0;
  }

  const Factory& resolve(const std::string& name) const {
    std::lock_guard lock(mutex_);
    auto it = factories_.find(name);
    if (it == factories_.end()) throw ConfigError("unknown backend '" + name + "'");
    return it->second;
  }

  std::unique_ptr<Interface> create(const std::string& name,
                                    const nlohmann::json& params = nlohmann::json::object()) const {
    return resolve(name)(params);
  }

  std::vector<std::string> names() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [name, _] : factories_) out.push_back(name);
    return out;
  }

 private:
  mutable std::mutex mutex_;
  std::map<std::string, Factory> factories_;
};

/// Process-wide registries, pre-populated with the toy backends.
Registry<DiffusionBackend>& diffusion_registry();
Registry<DetectorBackend>& detector_registry();
Registry<SimilarityBackend>& similarity_registry();

/// dlopen() every shared object in the ':'-separated search path and call its
/// `badpatch_register_plugins` entry point. Returns the number loaded.
int load_plugins(const std::string& search_path);

struct LossConfig;

/// Mean of per-detector loss gradients with respect to the input images.
std::vector<Image> ensemble_gradient(std::span<const DetectorBackend* const> detectors,
                                     std::span<const Image> images,
                                     std::span<const std::vector<Box>> gt, const LossConfig& config);

/// Runs fn(i) for i in [0, n); fans out to threads only when `parallel` is set.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, bool parallel);

}  // namespace badpatch

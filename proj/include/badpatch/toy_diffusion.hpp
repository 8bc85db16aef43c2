#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "badpatch/backends.hpp"

namespace badpatch {

struct ToyDiffusionParams {
  std::uint64_t seed = 7;
  int channels = 3;
  int size = 16;
  int tokens = 4;
  int embed_dim = 8;
  int train_steps = 1000;
  // |a_t| bound. Small enough that 10-step DDIM inversion at w=1 is near-exact.
  double slope_bound = 1e-5;
  double prompt_gain = 0.3;
  double offset_gain = 1.0;
  // Text embeddings are a shared base plus a prompt-specific part of this scale.
  double text_spread = 0.05;

  static ToyDiffusionParams from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Desk-scale stand-in for a latent diffusion model.
///
/// eps(z, t, e) = a_t * z + B * mean_tokens(e) + c_t with seeded a_t, B and
/// c_t = cos(theta_t) c1 + sin(theta_t) c2. Encoding and decoding are the
/// identity, so the "image" is the latent itself (pixel factor 1).
class ToyLinearDiffusion final : public DiffusionBackend {
 public:
  explicit ToyLinearDiffusion(ToyDiffusionParams params = {});

  std::string name() const override { return "toy-linear"; }
  Shape latent_shape() const override { return {params_.channels, params_.size, params_.size}; }
  int pixel_factor() const override { return 1; }
  int train_steps() const override { return params_.train_steps; }
  Concurrency concurrency() const override { return Concurrency::concurrent_read; }
  double reconstruction_tolerance() const override { return 0.0; }

  Tensor predict_noise(const Tensor& z, int timestep, const ConditionEmbedding& e) const override;
  ConditionEmbedding noise_embedding_vjp(const Tensor& z, int timestep, const ConditionEmbedding& e,
                                         const Tensor& upstream) const override;

  Tensor encode_image(const Image& image) const override;
  Image decode_latent(const Tensor& z0) const override;
  Tensor decode_vjp(const Tensor& z0, const Image& upstream) const override;

  ConditionEmbedding embed_text(std::string_view text) const override;

  double slope(int timestep) const { return slopes_.at(static_cast<std::size_t>(timestep)); }
  /// B * mean_tokens(e) + c_t, the z-independent part of the prediction.
  Tensor offset(int timestep, const ConditionEmbedding& e) const;
  const ToyDiffusionParams& params() const { return params_; }

 private:
  void check_latent(const Tensor& z) const;
  void check_embedding(const ConditionEmbedding& e) const;

  ToyDiffusionParams params_;
  std::vector<double> slopes_;
  std::vector<double> prompt_matrix_;  // latent_size x embed_dim, row-major
  Tensor offset_cos_;
  Tensor offset_sin_;
  std::vector<double> text_base_;
};

}  // namespace badpatch

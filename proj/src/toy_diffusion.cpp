#include "badpatch/toy_diffusion.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "badpatch/hash.hpp"

namespace badpatch {

ToyDiffusionParams ToyDiffusionParams::from_json(const nlohmann::json& j) {
  ToyDiffusionParams p;
  p.seed = j.value("seed", p.seed);
  p.channels = j.value("channels", p.channels);
  p.size = j.value("size", p.size);
  p.tokens = j.value("tokens", p.tokens);
  p.embed_dim = j.value("embed_dim", p.embed_dim);
  p.train_steps = j.value("train_steps", p.train_steps);
  p.slope_bound = j.value("slope_bound", p.slope_bound);
  p.prompt_gain = j.value("prompt_gain", p.prompt_gain);
  p.offset_gain = j.value("offset_gain", p.offset_gain);
  p.text_spread = j.value("text_spread", p.text_spread);
  if (p.channels < 1 || p.size < 1 || p.tokens < 1 || p.embed_dim < 1 || p.train_steps < 1) {
    throw ConfigError("toy-linear: extents must be positive");
  }
  if (!(p.slope_bound >= 0.0 && p.slope_bound <= 0.5)) {
    throw ConfigError("toy-linear: slope_bound must lie in [0, 0.5]");
  }
  return p;
}

nlohmann::json ToyDiffusionParams::to_json() const {
  return {{"seed", seed},           {"channels", channels},       {"size", size},
          {"tokens", tokens},       {"embed_dim", embed_dim},     {"train_steps", train_steps},
          {"slope_bound", slope_bound}, {"prompt_gain", prompt_gain}, {"offset_gain", offset_gain},
          {"text_spread", text_spread}};
}

ToyLinearDiffusion::ToyLinearDiffusion(ToyDiffusionParams params) : params_(params) {
  std::mt19937_64 rng(params_.seed);
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  slopes_.resize(static_cast<std::size_t>(params_.train_steps));
  for (auto& a : slopes_) a = params_.slope_bound * uniform(rng);

  const Shape shape = latent_shape();
  prompt_matrix_.resize(shape.size() * static_cast<std::size_t>(params_.embed_dim));
  for (auto& b : prompt_matrix_) b = params_.prompt_gain * normal(rng);

  offset_cos_ = Tensor(shape);
  offset_sin_ = Tensor(shape);
  for (auto& v : offset_cos_.values()) v = params_.offset_gain * normal(rng);
  for (auto& v : offset_sin_.values()) v = params_.offset_gain * normal(rng);

  text_base_.resize(static_cast<std::size_t>(params_.tokens * params_.embed_dim));
  for (auto& v : text_base_) v = 0.5 * normal(rng);
}

void ToyLinearDiffusion::check_latent(const Tensor& z) const {
  if (!(z.shape() == latent_shape())) throw BackendError("toy-linear: latent shape mismatch");
}

void ToyLinearDiffusion::check_embedding(const ConditionEmbedding& e) const {
  if (e.tokens() != params_.tokens || e.dim() != params_.embed_dim || e.e.shape().channels != 1) {
    throw BackendError("toy-linear: embedding shape mismatch");
  }
}

Tensor ToyLinearDiffusion::offset(int timestep, const ConditionEmbedding& e) const {
  check_embedding(e);
  if (timestep < 0 || timestep >= params_.train_steps) {
    throw BackendError("toy-linear: timestep out of range");
  }
  const int dim = params_.embed_dim;
  std::vector<double> pooled(static_cast<std::size_t>(dim), 0.0);
  for (int l = 0; l < params_.tokens; ++l) {
    for (int d = 0; d < dim; ++d) pooled[static_cast<std::size_t>(d)] += e.e(0, l, d);
  }
  for (auto& v : pooled) v /= params_.tokens;

  const double theta = std::numbers::pi * timestep / (2.0 * params_.train_steps);
  const double cs = std::cos(theta);
  const double sn = std::sin(theta);
  Tensor out(latent_shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double* row = &prompt_matrix_[i * static_cast<std::size_t>(dim)];
    double acc = 0.0;
    for (int d = 0; d < dim; ++d) acc += row[d] * pooled[static_cast<std::size_t>(d)];
    out[i] = acc + cs * offset_cos_[i] + sn * offset_sin_[i];
  }
  return out;
}

Tensor ToyLinearDiffusion::predict_noise(const Tensor& z, int timestep,
                                         const ConditionEmbedding& e) const {
  check_latent(z);
  Tensor out = offset(timestep, e);
  const double a = slopes_[static_cast<std::size_t>(timestep)];
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += a * z[i];
  return out;
}

ConditionEmbedding ToyLinearDiffusion::noise_embedding_vjp(const Tensor& z, int timestep,
                                                           const ConditionEmbedding& e,
                                                           const Tensor& upstream) const {
  check_latent(z);
  check_latent(upstream);
  check_embedding(e);
  if (timestep < 0 || timestep >= params_.train_steps) {
    throw BackendError("toy-linear: timestep out of range");
  }
  const int dim = params_.embed_dim;
  std::vector<double> g_pooled(static_cast<std::size_t>(dim), 0.0);
  for (std::size_t i = 0; i < upstream.size(); ++i) {
    const double* row = &prompt_matrix_[i * static_cast<std::size_t>(dim)];
    for (int d = 0; d < dim; ++d) g_pooled[static_cast<std::size_t>(d)] += row[d] * upstream[i];
  }
  ConditionEmbedding grad{Tensor(e.e.shape())};
  for (int l = 0; l < params_.tokens; ++l) {
    for (int d = 0; d < dim; ++d) {
      grad.e(0, l, d) = g_pooled[static_cast<std::size_t>(d)] / params_.tokens;
    }
  }
  return grad;
}

Tensor ToyLinearDiffusion::encode_image(const Image& image) const {
  if (!(image.shape() == latent_shape())) {
    throw BackendError("toy-linear: image must be " + std::to_string(params_.channels) + "x" +
                       std::to_string(params_.size) + "x" + std::to_string(params_.size));
  }
  return image;
}

Image ToyLinearDiffusion::decode_latent(const Tensor& z0) const {
  check_latent(z0);
  return z0;
}

Tensor ToyLinearDiffusion::decode_vjp(const Tensor& z0, const Image& upstream) const {
  check_latent(z0);
  check_latent(upstream);
  return upstream;
}

ConditionEmbedding ToyLinearDiffusion::embed_text(std::string_view text) const {
  std::mt19937_64 rng(fnv1a64(text) ^ params_.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ConditionEmbedding out{Tensor(Shape{1, params_.tokens, params_.embed_dim})};
  for (std::size_t i = 0; i < out.e.size(); ++i) {
    out.e[i] = text_base_[i] + params_.text_spread * normal(rng);
  }
  return out;
}

}  // namespace badpatch

#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "badpatch/tensor.hpp"

namespace badpatch {

class DiffusionBackend;

/// Which DDIM recurrence to use.
///
/// `unscaled` applies the inversion step with the bare noise coefficient
/// (sqrt(1/a_next - 1) - sqrt(1/a_cur - 1)); `standard` multiplies that
/// coefficient by sqrt(a_next), which is the textbook DDIM update. Sampling is
/// the exact algebraic inverse of the matching inversion step in both cases.
enum class DdimFormula { unscaled, standard };

DdimFormula parse_formula(std::string_view name);
std::string_view to_string(DdimFormula formula);

/// Training noise schedule plus the DDIM timestep subsample.
///
/// Latent "levels" run 0..ddim_steps. Level 0 is the clean latent with
/// alpha_bar := 1; level k >= 1 sits at training timestep timestep_index[k-1].
class NoiseSchedule {
 public:
  /// Scaled-linear betas (linear in sqrt(beta)), the latent-diffusion default.
  static NoiseSchedule scaled_linear(int train_steps, double beta_min, double beta_max,
                                     int ddim_steps);
  static NoiseSchedule from_betas(std::vector<double> betas, int ddim_steps);

  int train_steps() const { return static_cast<int>(betas_.size()); }
  int ddim_steps() const { return static_cast<int>(timestep_index_.size()); }
  std::span<const double> betas() const { return betas_; }
  std::span<const double> alpha_bar() const { return alpha_bar_; }
  std::span<const int> timestep_index() const { return timestep_index_; }

  double beta_min() const { return beta_min_; }
  double beta_max() const { return beta_max_; }
  bool is_scaled_linear() const { return scaled_linear_; }

  double level_alpha(int level) const;
  int level_timestep(int level) const;

  void write_csv(std::ostream& out) const;

 private:
  NoiseSchedule(std::vector<double> betas, int ddim_steps);

  std::vector<double> betas_;
  std::vector<double> alpha_bar_;
  std::vector<int> timestep_index_;
  double beta_min_ = 0.0;
  double beta_max_ = 0.0;
  bool scaled_linear_ = false;
};

NoiseSchedule build_schedule(int train_steps, double beta_min, double beta_max, int ddim_steps);

/// Latent tensor tagged with its schedule level.
struct LatentState {
  Tensor z;
  int step = 0;
};

/// Text-conditioning embedding, stored as a {1, tokens, dim} tensor.
struct ConditionEmbedding {
  Tensor e;

  int tokens() const { return e.shape().height; }
  int dim() const { return e.shape().width; }
  bool operator==(const ConditionEmbedding&) const = default;
};

struct GuidanceConfig {
  double w = 7.5;
  ConditionEmbedding cond;
  ConditionEmbedding uncond;
};

/// z_next = latent_scale * z + noise_scale * eps
struct StepCoefficients {
  double latent_scale = 1.0;
  double noise_scale = 0.0;
};

StepCoefficients invert_coefficients(const NoiseSchedule& s, int from_level, DdimFormula formula);
StepCoefficients sample_coefficients(const NoiseSchedule& s, int from_level, DdimFormula formula);

/// Classifier-free guidance: w * eps(z, t, cond) + (1 - w) * eps(z, t, uncond).
Tensor cfg_noise(const LatentState& z, int timestep, const GuidanceConfig& g,
                 const DiffusionBackend& backend);

/// One DDIM inversion step, level z.step -> z.step + 1.
LatentState ddim_invert_step(const LatentState& z, const Tensor& eps, const NoiseSchedule& s,
                             DdimFormula formula);

/// One DDIM sampling step, level z.step -> z.step - 1.
LatentState ddim_sample_step(const LatentState& z, const Tensor& eps, const NoiseSchedule& s,
                             DdimFormula formula);

}  // namespace badpatch

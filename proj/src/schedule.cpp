#include "badpatch/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "badpatch/backends.hpp"
#include "badpatch/error.hpp"

namespace badpatch {

DdimFormula parse_formula(std::string_view name) {
  if (name == "unscaled") return DdimFormula::unscaled;
  if (name == "standard") return DdimFormula::standard;
  throw ConfigError("unknown DDIM formula '" + std::string(name) + "' (expected unscaled|standard)");
}

std::string_view to_string(DdimFormula formula) {
  return formula == DdimFormula::unscaled ? "unscaled" : "standard";
}

NoiseSchedule::NoiseSchedule(std::vector<double> betas, int ddim_steps) : betas_(std::move(betas)) {
  const int train = static_cast<int>(betas_.size());
  if (train < 1) throw ConfigError("schedule: need at least one training timestep");
  if (ddim_steps < 1 || ddim_steps > train) {
    throw ConfigError("schedule: ddim_steps must lie in [1, train_steps]");
  }
  alpha_bar_.resize(betas_.size());
  double prod = 1.0;
  for (std::size_t i = 0; i < betas_.size(); ++i) {
    if (!(betas_[i] > 0.0 && betas_[i] < 1.0)) throw ConfigError("schedule: beta outside (0,1)");
    prod *= 1.0 - betas_[i];
    alpha_bar_[i] = prod;
  }
  const int stride = train / ddim_steps;
  timestep_index_.resize(static_cast<std::size_t>(ddim_steps));
  for (int i = 0; i < ddim_steps; ++i) timestep_index_[static_cast<std::size_t>(i)] = i * stride;
}

NoiseSchedule NoiseSchedule::scaled_linear(int train_steps, double beta_min, double beta_max,
                                           int ddim_steps) {
  if (train_steps < 1) throw ConfigError("schedule: train_steps must be >= 1");
  if (!(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0)) {
    throw ConfigError("schedule: require 0 < beta_min < beta_max < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(train_steps));
  const double lo = std::sqrt(beta_min);
  const double hi = std::sqrt(beta_max);
  for (int i = 0; i < train_steps; ++i) {
    const double frac = train_steps == 1 ? 0.0 : static_cast<double>(i) / (train_steps - 1);
    const double root = lo + frac * (hi - lo);
    betas[static_cast<std::size_t>(i)] = root * root;
  }
  NoiseSchedule s(std::move(betas), ddim_steps);
  s.beta_min_ = beta_min;
  s.beta_max_ = beta_max;
  s.scaled_linear_ = true;
  return s;
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas, int ddim_steps) {
  NoiseSchedule s(std::move(betas), ddim_steps);
  s.beta_min_ = *std::min_element(s.betas_.begin(), s.betas_.end());
  s.beta_max_ = *std::max_element(s.betas_.begin(), s.betas_.end());
  return s;
}

double NoiseSchedule::level_alpha(int level) const {
  if (level < 0 || level > ddim_steps()) throw std::out_of_range("schedule level out of range");
  if (level == 0) return 1.0;
  return alpha_bar_[static_cast<std::size_t>(timestep_index_[static_cast<std::size_t>(level - 1)])];
}

int NoiseSchedule::level_timestep(int level) const {
  if (level < 1 || level > ddim_steps()) throw std::out_of_range("schedule level out of range");
  return timestep_index_[static_cast<std::size_t>(level - 1)];
}

void NoiseSchedule::write_csv(std::ostream& out) const {
  out << "timestep,beta,alpha_bar,ddim_level\n";
  std::size_t next = 0;
  out << std::setprecision(17);
  for (std::size_t t = 0; t < betas_.size(); ++t) {
    int level = -1;
    if (next < timestep_index_.size() && timestep_index_[next] == static_cast<int>(t)) {
      level = static_cast<int>(next) + 1;
      ++next;
    }
    out << t << ',' << betas_[t] << ',' << alpha_bar_[t] << ',';
    if (level > 0) out << level;
    out << '\n';
  }
}

NoiseSchedule build_schedule(int train_steps, double beta_min, double beta_max, int ddim_steps) {
  return NoiseSchedule::scaled_linear(train_steps, beta_min, beta_max, ddim_steps);
}

namespace {

// Coefficients for moving from level `from` to level `to` (adjacent levels).
// unscaled: z_to = sqrt(a_to/a_from) z + (sqrt(1/a_to - 1) - sqrt(1/a_from - 1)) eps
// standard: z_to = sqrt(a_to/a_from) z + sqrt(a_to)(sqrt(1/a_to - 1) - sqrt(1/a_from - 1)) eps
StepCoefficients forward_coefficients(double a_from, double a_to, DdimFormula formula) {
  const double diff = std::sqrt(1.0 / a_to - 1.0) - std::sqrt(1.0 / a_from - 1.0);
  StepCoefficients c;
  c.latent_scale = std::sqrt(a_to / a_from);
  c.noise_scale = formula == DdimFormula::standard ? std::sqrt(a_to) * diff : diff;
  return c;
}

}  // namespace

StepCoefficients invert_coefficients(const NoiseSchedule& s, int from_level, DdimFormula formula) {
  if (from_level < 0 || from_level + 1 > s.ddim_steps()) {
    throw std::out_of_range("ddim_invert_step: step out of range");
  }
  return forward_coefficients(s.level_alpha(from_level), s.level_alpha(from_level + 1), formula);
}

StepCoefficients sample_coefficients(const NoiseSchedule& s, int from_level, DdimFormula formula) {
  if (from_level < 1 || from_level > s.ddim_steps()) {
    throw std::out_of_range("ddim_sample_step: step out of range");
  }
  // Exact inverse of the inversion step from_level-1 -> from_level.
  const StepCoefficients fwd = invert_coefficients(s, from_level - 1, formula);
  StepCoefficients c;
  c.latent_scale = 1.0 / fwd.latent_scale;
  c.noise_scale = -fwd.noise_scale / fwd.latent_scale;
  return c;
}

Tensor cfg_noise(const LatentState& z, int timestep, const GuidanceConfig& g,
                 const DiffusionBackend& backend) {
  if (g.w < 0.0) throw ConfigError("cfg_noise: guidance scale must be >= 0");
  if (timestep < 0 || timestep >= backend.train_steps()) {
    throw std::out_of_range("cfg_noise: timestep outside the backend schedule");
  }
  try {
    const Tensor eps_cond = backend.predict_noise(z.z, timestep, g.cond);
    // Both shortcuts are exact identities of the guided combination.
    if (g.w == 1.0 || g.cond == g.uncond) return eps_cond;
    const Tensor eps_uncond = backend.predict_noise(z.z, timestep, g.uncond);
    return lincomb(g.w, eps_cond, 1.0 - g.w, eps_uncond);
  } catch (const BackendError&) {
    throw;
  } catch (const std::exception& ex) {
    throw BackendError("noise prediction failed at timestep " + std::to_string(timestep) + ": " +
                       ex.what());
  }
}

namespace {

LatentState apply_step(const LatentState& z, const Tensor& eps, StepCoefficients c, int next) {
  if (!(eps.shape() == z.z.shape())) throw std::invalid_argument("DDIM step: eps shape mismatch");
  return LatentState{lincomb(c.latent_scale, z.z, c.noise_scale, eps), next};
}

}  // namespace

LatentState ddim_invert_step(const LatentState& z, const Tensor& eps, const NoiseSchedule& s,
                             DdimFormula formula) {
  return apply_step(z, eps, invert_coefficients(s, z.step, formula), z.step + 1);
}

LatentState ddim_sample_step(const LatentState& z, const Tensor& eps, const NoiseSchedule& s,
                             DdimFormula formula) {
  return apply_step(z, eps, sample_coefficients(s, z.step, formula), z.step - 1);
}

}  // namespace badpatch

#include "badpatch/inversion.hpp"

#include <cmath>

#include <spdlog/spdlog.h>

#include "badpatch/archive.hpp"
#include "badpatch/optim.hpp"

namespace badpatch {

void NullTextConfig::validate() const {
  if (!(w >= 0.0)) throw ConfigError("inversion: guidance scale must be >= 0");
  if (n_inner < 0) throw ConfigError("inversion: n_inner must be >= 0");
  if (!(lr >= 0.0)) throw ConfigError("inversion: lr must be >= 0");
  if (!(early_exit >= 0.0)) throw ConfigError("inversion: early_exit must be >= 0");
}

void InversionTrajectory::validate() const {
  if (half_t < 0) throw ConfigError("trajectory: negative depth");
  if (pivot_latents.size() != static_cast<std::size_t>(half_t) + 1) {
    throw ConfigError("trajectory: expected depth + 1 pivot latents");
  }
  if (null_embeddings.size() != static_cast<std::size_t>(half_t)) {
    throw ConfigError("trajectory: expected one null embedding per step");
  }
  for (std::size_t i = 0; i < pivot_latents.size(); ++i) {
    if (pivot_latents[i].step != half_t - static_cast<int>(i)) {
      throw ConfigError("trajectory: pivot levels out of order");
    }
    if (!pivot_latents[i].z.all_finite()) throw ConfigError("trajectory: non-finite pivot latent");
  }
  for (const auto& phi : null_embeddings) {
    if (!(phi.e.shape() == cond.e.shape())) throw ConfigError("trajectory: embedding shape mismatch");
  }
  if (!(reconstruction_error >= 0.0)) throw ConfigError("trajectory: bad reconstruction error");
}

std::vector<LatentState> pivotal_invert(const LatentState& z0, const ConditionEmbedding& cond,
                                        const NoiseSchedule& s, int depth,
                                        const DiffusionBackend& backend, DdimFormula formula) {
  if (depth < 0 || depth > s.ddim_steps()) {
    throw ConfigError("pivotal_invert: depth must lie in [0, ddim_steps]");
  }
  if (z0.step != 0) throw std::invalid_argument("pivotal_invert: input latent must be at level 0");
  const GuidanceConfig guide{1.0, cond, cond};
  std::vector<LatentState> forward{z0};
  forward.reserve(static_cast<std::size_t>(depth) + 1);
  for (int k = 0; k < depth; ++k) {
    const LatentState& cur = forward.back();
    const Tensor eps = cfg_noise(cur, s.level_timestep(k + 1), guide, backend);
    LatentState next = ddim_invert_step(cur, eps, s, formula);
    if (!next.z.all_finite()) {
      throw NumericError("pivotal_invert: non-finite latent at level " + std::to_string(k + 1));
    }
    forward.push_back(std::move(next));
  }
  return {forward.rbegin(), forward.rend()};
}

namespace {

struct StepProblem {
  const LatentState& from;
  const Tensor& target;
  const ConditionEmbedding& cond;
  int timestep;
  double w;
  StepCoefficients coeff;
  const DiffusionBackend& backend;

  Tensor predict(const ConditionEmbedding& phi) const {
    const Tensor eps = cfg_noise(from, timestep, GuidanceConfig{w, cond, phi}, backend);
    return lincomb(coeff.latent_scale, from.z, coeff.noise_scale, eps);
  }

  double objective(const ConditionEmbedding& phi) const {
    const Tensor r = predict(phi) - target;
    return dot(r, r);
  }

  ConditionEmbedding gradient(const ConditionEmbedding& phi) const {
    // d/dphi ||A z + N (w e_c + (1-w) e_u(phi)) - target||^2
    Tensor upstream = predict(phi) - target;
    upstream *= 2.0 * coeff.noise_scale * (1.0 - w);
    return backend.noise_embedding_vjp(from.z, timestep, phi, upstream);
  }
};

}  // namespace

InversionTrajectory optimize_null_text(std::vector<LatentState> pivots,
                                       const ConditionEmbedding& cond,
                                       const ConditionEmbedding& null_init, const NoiseSchedule& s,
                                       const DiffusionBackend& backend, const NullTextConfig& config) {
  config.validate();
  if (pivots.empty()) throw std::invalid_argument("optimize_null_text: no pivot latents");
  const int depth = static_cast<int>(pivots.size()) - 1;
  if (pivots.front().step != depth) {
    throw std::invalid_argument("optimize_null_text: pivots must run from level depth to 0");
  }

  InversionTrajectory traj;
  traj.cond = cond;
  traj.half_t = depth;
  traj.w = config.w;
  traj.formula = config.formula;

  LatentState current = pivots.front();
  ConditionEmbedding phi = null_init;
  for (int i = 0; i < depth; ++i) {
    const int level = depth - i;
    const StepProblem problem{current,
                              pivots[static_cast<std::size_t>(i) + 1].z,
                              cond,
                              s.level_timestep(level),
                              config.w,
                              sample_coefficients(s, level, config.formula),
                              backend};

    double best = problem.objective(phi);
    std::vector<double> history{best};
    Adam adam(config.lr);
    double step_scale = 1.0;
    int accepted = 0;
    int rejected = 0;
    for (int it = 0; it < config.n_inner && best >= config.early_exit; ++it) {
      const ConditionEmbedding grad = problem.gradient(phi);
      if (!grad.e.all_finite()) {
        spdlog::warn("null-text: non-finite gradient at level {}, stopping early", level);
        break;
      }
      Tensor update = adam.step(grad.e);
      update *= step_scale;
      ConditionEmbedding candidate{phi.e - update};
      const double value = problem.objective(candidate);
      if (std::isfinite(value) && value <= best) {
        phi = std::move(candidate);
        best = value;
        history.push_back(best);
        ++accepted;
      } else {
        // Backtrack: the next proposal uses half the step.
        step_scale *= 0.5;
        ++rejected;
      }
    }
    if (accepted == 0 && rejected > 0) {
      spdlog::warn("null-text: objective never decreased at level {} ({} attempts); keeping best embedding",
                   level, rejected);
    }
    traj.objective_history.push_back(std::move(history));
    traj.null_embeddings.push_back(phi);

    current = LatentState{problem.predict(phi), level - 1};
    if (!current.z.all_finite()) {
      throw NumericError("null-text: non-finite latent at level " + std::to_string(level - 1));
    }
  }
  traj.reconstruction_error = relative_error(current.z, pivots.back().z, pivots.back().z);
  traj.pivot_latents = std::move(pivots);
  return traj;
}

Tensor regenerate(const Tensor& start, const ConditionEmbedding& cond,
                  const std::vector<ConditionEmbedding>& null_embeddings, double w,
                  const NoiseSchedule& s, const DiffusionBackend& backend, DdimFormula formula) {
  const int depth = static_cast<int>(null_embeddings.size());
  LatentState z{start, depth};
  for (int i = 0; i < depth; ++i) {
    const GuidanceConfig guide{w, cond, null_embeddings[static_cast<std::size_t>(i)]};
    const Tensor eps = cfg_noise(z, s.level_timestep(z.step), guide, backend);
    z = ddim_sample_step(z, eps, s, formula);
  }
  return std::move(z.z);
}

Tensor regenerate(const InversionTrajectory& traj, const Tensor& start, const NoiseSchedule& s,
                  const DiffusionBackend& backend) {
  return regenerate(start, traj.cond, traj.null_embeddings, traj.w, s, backend, traj.formula);
}

void save_trajectory(const std::filesystem::path& path, const InversionTrajectory& traj) {
  traj.validate();
  Archive a;
  a.kind = "trajectory";
  a.meta = {{"half_t", traj.half_t},
            {"w", traj.w},
            {"formula", std::string(to_string(traj.formula))},
            {"reconstruction_error", traj.reconstruction_error},
            {"context", traj.context},
            {"attachments", nlohmann::json::array()}};
  // Zero-padded keys keep the archive's name order equal to level order.
  auto key = [](const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s/%05zu", prefix, i);
    return std::string(buf);
  };
  for (std::size_t i = 0; i < traj.pivot_latents.size(); ++i) {
    a.tensors[key("pivot", i)] = traj.pivot_latents[i].z;
  }
  for (std::size_t i = 0; i < traj.null_embeddings.size(); ++i) {
    a.tensors[key("null", i)] = traj.null_embeddings[i].e;
  }
  for (std::size_t i = 0; i < traj.objective_history.size(); ++i) {
    a.tensors[key("objective", i)] = pack_vector(traj.objective_history[i]);
  }
  a.tensors["cond"] = traj.cond.e;
  for (const auto& [name, t] : traj.attachments) {
    a.meta["attachments"].push_back(name);
    a.tensors["attach/" + name] = t;
  }
  write_archive(path, a);
}

InversionTrajectory load_trajectory(const std::filesystem::path& path) {
  const Archive a = read_archive(path);
  if (a.kind != "trajectory") throw ConfigError(path.string() + " is not a trajectory archive");
  InversionTrajectory traj;
  try {
    traj.half_t = a.meta.at("half_t").get<int>();
    traj.w = a.meta.at("w").get<double>();
    traj.formula = parse_formula(a.meta.at("formula").get<std::string>());
    traj.reconstruction_error = a.meta.at("reconstruction_error").get<double>();
    traj.context = a.meta.value("context", nlohmann::json::object());
    for (const auto& name : a.meta.value("attachments", nlohmann::json::array())) {
      traj.attachments[name.get<std::string>()] = a.tensor("attach/" + name.get<std::string>());
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(path.string() + ": bad trajectory metadata: " + ex.what());
  }
  traj.cond = ConditionEmbedding{a.tensor("cond")};
  for (const auto& [name, t] : a.tensors) {
    if (name.rfind("pivot/", 0) == 0) {
      traj.pivot_latents.push_back(
          LatentState{t, traj.half_t - static_cast<int>(traj.pivot_latents.size())});
    } else if (name.rfind("null/", 0) == 0) {
      traj.null_embeddings.push_back(ConditionEmbedding{t});
    } else if (name.rfind("objective/", 0) == 0) {
      traj.objective_history.push_back(unpack_vector(t));
    }
  }
  traj.validate();
  return traj;
}

}  // namespace badpatch

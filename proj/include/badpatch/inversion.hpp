#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "badpatch/backends.hpp"
#include "badpatch/schedule.hpp"

namespace badpatch {

struct NullTextConfig {
  double w = 7.5;
  int n_inner = 10;
  double lr = 0.01;
  // A timestep whose objective is already below this is left alone.
  double early_exit = 1e-5;
  DdimFormula formula = DdimFormula::standard;

  void validate() const;
};

/// Pivotal latents z*_depth..z*_0 and the per-step null embeddings that make
/// guided sampling retrace them.
///
/// null_embeddings[i] drives the sampling step from pivot_latents[i] (level
/// depth - i) to level depth - i - 1.
struct InversionTrajectory {
  std::vector<LatentState> pivot_latents;
  std::vector<ConditionEmbedding> null_embeddings;
  ConditionEmbedding cond;
  int half_t = 0;
  double w = 7.5;
  DdimFormula formula = DdimFormula::standard;
  /// ||regenerated z_0 - z*_0|| / ||z*_0||
  double reconstruction_error = 0.0;
  /// Accepted objective values per timestep, first entry before any update.
  std::vector<std::vector<double>> objective_history;

  /// Provenance carried into the archive (backend, schedule, prompt, ...).
  nlohmann::json context = nlohmann::json::object();
  /// Extra tensors carried into the archive (reference image, mask, ...).
  std::map<std::string, Tensor> attachments;

  const Tensor& z0() const { return pivot_latents.back().z; }
  const Tensor& start() const { return pivot_latents.front().z; }
  void validate() const;
};

/// DDIM inversion at w = 1. Returns depth + 1 latents, index 0 at level depth
/// and the last one equal to z0.
std::vector<LatentState> pivotal_invert(const LatentState& z0, const ConditionEmbedding& cond,
                                        const NoiseSchedule& s, int depth,
                                        const DiffusionBackend& backend,
                                        DdimFormula formula = DdimFormula::standard);

/// Per-timestep null-text optimization along the pivots, starting from `null_init`.
InversionTrajectory optimize_null_text(std::vector<LatentState> pivots,
                                       const ConditionEmbedding& cond,
                                       const ConditionEmbedding& null_init, const NoiseSchedule& s,
                                       const DiffusionBackend& backend, const NullTextConfig& config);

/// Samples from `start` (level = embeddings.size()) down to level 0 with
/// guidance w and one unconditional embedding per step.
Tensor regenerate(const Tensor& start, const ConditionEmbedding& cond,
                  const std::vector<ConditionEmbedding>& null_embeddings, double w,
                  const NoiseSchedule& s, const DiffusionBackend& backend, DdimFormula formula);

/// Same as above using the trajectory's own embeddings.
Tensor regenerate(const InversionTrajectory& traj, const Tensor& start, const NoiseSchedule& s,
                  const DiffusionBackend& backend);

void save_trajectory(const std::filesystem::path& path, const InversionTrajectory& traj);
InversionTrajectory load_trajectory(const std::filesystem::path& path);

}  // namespace badpatch

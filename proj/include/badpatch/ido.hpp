#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "badpatch/backends.hpp"
#include "badpatch/inversion.hpp"
#include "badpatch/losses.hpp"
#include "badpatch/optim.hpp"
#include "badpatch/render.hpp"

namespace badpatch {

/// Perturbation of the mid-trajectory latent and everything needed to resume.
struct OptimizationState {
  Tensor delta;
  double epsilon = 0.5;
  Mask latent_mask;
  std::vector<double> loss_history;
  /// Mean over images of the strongest target-class score, per iteration.
  std::vector<double> score_history;
  int iteration = 0;
  AdamState adam;

  /// Throws NumericError if |delta| exceeds epsilon or delta is nonzero off the mask.
  void check_invariants() const;
};

struct IdoConfig {
  double lr = 0.003;
  double epsilon = 0.5;
  int iterations = 200;
  int batch = 32;
  LossConfig loss;
  double tau = 0.2;
  AugmentConfig augment;
  /// Restrict the perturbation to the downsampled patch mask.
  bool mask_control = true;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;
  // Stored verbatim in every checkpoint this run writes.
  nlohmann::json checkpoint_context = nlohmann::json::object();
  bool parallel = false;

  void validate() const;
};

/// prod_{k=1..depth} sqrt(abar_{k-1} / abar_k), the gain dz_0/dz_depth with
/// the noise prediction held fixed.
double approx_gradient_scale(const NoiseSchedule& s, int depth);

/// Clamp to [-epsilon, epsilon], then zero every cell off the latent mask.
Tensor project_delta(const Tensor& delta, double epsilon, const Mask& latent_mask);

/// Everything an IDO run reads but never modifies.
struct IdoInputs {
  const InversionTrajectory& trajectory;
  const NoiseSchedule& schedule;
  const DiffusionBackend& diffusion;
  const DetectorBackend& detector;
  const PatchSpec& spec;
  const TrainingSet& data;
};

/// Decodes the patch for a given perturbation: Psi(regenerate(z_start + delta)).
Image generate_patch(const IdoInputs& in, const Tensor& delta, Tensor* z0_out = nullptr);

/// Loss, patch gradient and mean strongest score over a set of scenes.
struct BatchEvaluation {
  double loss = 0.0;
  double mean_max_score = 0.0;
  Image patch_grad;
};

BatchEvaluation evaluate_patch(const IdoInputs& in, const Image& patch, const IdoConfig& config,
                               std::span<const std::size_t> indices,
                               std::span<const PatchTransform> transforms, bool with_grad);

struct IdoResult {
  Image patch;
  Mask mask;
  OptimizationState state;
  /// Loss of the final patch over the whole training set with fixed transforms.
  double final_loss = 0.0;
};

/// Called after every iteration with the patch decoded for that iteration.
using IterationCallback =
    std::function<void(const OptimizationState& state, const Image& iteration_patch)>;

IdoResult ido_run(const IdoInputs& in, const IdoConfig& config,
                  std::optional<OptimizationState> resume = std::nullopt,
                  const IterationCallback& on_iteration = {});

/// Loss of `patch` over the full training set with the run's fixed evaluation transforms.
double evaluate_final_loss(const IdoInputs& in, const Image& patch, const IdoConfig& config);

void save_checkpoint(const std::filesystem::path& path, const OptimizationState& state,
                     const nlohmann::json& context = nlohmann::json::object());
OptimizationState load_checkpoint(const std::filesystem::path& path,
                                  nlohmann::json* context = nullptr);

/// Inversion settings for one pipeline pass.
struct InversionSettings {
  int depth = 25;
  NullTextConfig null_text;
};

/// Background replacement (when mask control is on), encoding, pivotal
/// inversion and null-text optimization of a patch spec.
InversionTrajectory invert_spec(const PatchSpec& spec, const NoiseSchedule& s,
                                const DiffusionBackend& backend, const InversionSettings& settings,
                                bool replace_background = true);

struct RoundResult {
  std::string artifact_id;
  InversionTrajectory trajectory;
  IdoResult result;
};

struct PipelineInputs {
  const NoiseSchedule& schedule;
  const DiffusionBackend& diffusion;
  const DetectorBackend& detector;
  const TrainingSet& data;
};

struct RoundOptions {
  // Round to start at (1-based); earlier rounds are skipped.
  int first_round = 1;
  // Trajectory for first_round instead of inverting the reference patch.
  const InversionTrajectory* trajectory = nullptr;
  // Optimizer state to resume first_round from.
  std::optional<OptimizationState> resume;
  std::function<void(const std::string& artifact_id, const PatchSpec& spec,
                     const InversionTrajectory&)>
      on_inverted;
  // Fires after every completed round so artifacts survive a later failure.
  std::function<void(const RoundResult&)> on_round;
  IterationCallback on_iteration;
};

/// Runs rounds first_round..rounds; each round's patch is the next round's
/// reference. Checkpoints of round r go to checkpoint_dir/round-0r and carry
/// the round number in their context.
std::vector<RoundResult> iterative_optimize(const PatchSpec& spec, int rounds,
                                            const PipelineInputs& in,
                                            const InversionSettings& inversion,
                                            const IdoConfig& config,
                                            const RoundOptions& options = {});

/// First iteration at which the running minimum of `history` has covered
/// `fraction` of its total reduction; 0 when there is no reduction.
int iterations_to_fraction(const std::vector<double>& history, double fraction);

}  // namespace badpatch

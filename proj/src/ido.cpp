#include "badpatch/ido.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "badpatch/archive.hpp"
#include "badpatch/hash.hpp"

namespace badpatch {

namespace {

// Stream tags for seed derivation; distinct per purpose.
constexpr std::uint64_t kShuffleTag = 0;
constexpr std::uint64_t kEvalTag = 0x65'76'61'6c;

std::vector<PatchTransform> sample_for(const IdoInputs& in, std::span<const std::size_t> indices,
                                       const AugmentConfig& aug, std::mt19937_64& rng) {
  std::vector<PatchTransform> out;
  for (std::size_t idx : indices) {
    for (std::size_t k = 0; k < in.data.person_boxes[idx].size(); ++k) {
      out.push_back(sample_transform(aug, rng));
    }
  }
  return out;
}

}  // namespace

void OptimizationState::check_invariants() const {
  const Shape& s = delta.shape();
  if (latent_mask.height() != s.height || latent_mask.width() != s.width) {
    throw NumericError("optimization state: latent mask does not match delta");
  }
  for (int c = 0; c < s.channels; ++c) {
    for (int y = 0; y < s.height; ++y) {
      for (int x = 0; x < s.width; ++x) {
        const double v = delta(c, y, x);
        if (!(std::abs(v) <= epsilon)) throw NumericError("optimization state: |delta| exceeds epsilon");
        if (!latent_mask(y, x) && v != 0.0) {
          throw NumericError("optimization state: delta nonzero off the latent mask");
        }
      }
    }
  }
}

void IdoConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("ido: lr must be >= 0");
  if (!(epsilon > 0.0)) throw ConfigError("ido: epsilon must be > 0");
  if (iterations < 0) throw ConfigError("ido: iterations must be >= 0");
  if (batch < 1) throw ConfigError("ido: batch must be >= 1");
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("ido: tau must lie in (0, 1)");
  if (checkpoint_every < 0) throw ConfigError("ido: checkpoint_every must be >= 0");
  loss.validate();
  augment.validate();
}

double approx_gradient_scale(const NoiseSchedule& s, int depth) {
  if (depth < 0 || depth > s.ddim_steps()) {
    throw ConfigError("approx_gradient_scale: depth must lie in [0, ddim_steps]");
  }
  double scale = 1.0;
  for (int k = 1; k <= depth; ++k) scale *= std::sqrt(s.level_alpha(k - 1) / s.level_alpha(k));
  return scale;
}

Tensor project_delta(const Tensor& delta, double epsilon, const Mask& latent_mask) {
  const Shape& s = delta.shape();
  if (latent_mask.height() != s.height || latent_mask.width() != s.width) {
    throw std::invalid_argument("project_delta: mask does not match delta");
  }
  Tensor out(s);
  for (int c = 0; c < s.channels; ++c) {
    for (int y = 0; y < s.height; ++y) {
      for (int x = 0; x < s.width; ++x) {
        out(c, y, x) = latent_mask(y, x) ? std::clamp(delta(c, y, x), -epsilon, epsilon) : 0.0;
      }
    }
  }
  return out;
}

Image generate_patch(const IdoInputs& in, const Tensor& delta, Tensor* z0_out) {
  Tensor z0 = regenerate(in.trajectory, in.trajectory.start() + delta, in.schedule, in.diffusion);
  Image patch = in.diffusion.decode_latent(z0);
  if (z0_out != nullptr) *z0_out = std::move(z0);
  return patch;
}

BatchEvaluation evaluate_patch(const IdoInputs& in, const Image& patch, const IdoConfig& config,
                               std::span<const std::size_t> indices,
                               std::span<const PatchTransform> transforms, bool with_grad) {
  const std::size_t n = indices.size();
  std::vector<std::size_t> offset(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) offset[i + 1] = offset[i] + in.data.person_boxes[indices[i]].size();
  if (transforms.size() != offset[n]) {
    throw std::invalid_argument("evaluate_patch: need one transform per person box");
  }

  std::vector<Image> scenes(n);
  std::vector<std::vector<PatchTrace>> traces(n);
  std::vector<Detections> raw(n);
  std::vector<std::vector<Box>> gt(n);
  const bool parallel =
      config.parallel && in.detector.concurrency() == Concurrency::concurrent_read;

  parallel_for(
      n,
      [&](std::size_t i) {
        const std::size_t idx = indices[i];
        Image scene = in.data.images[idx];
        const auto& boxes = in.data.person_boxes[idx];
        traces[i].resize(boxes.size());
        for (std::size_t k = 0; k < boxes.size(); ++k) {
          scene = apply_patch(scene, boxes[k], patch, in.spec.mask, config.tau,
                              transforms[offset[i] + k], with_grad ? &traces[i][k] : nullptr);
        }
        raw[i] = in.detector.detect_raw(scene);
        gt[i] = boxes;
        scenes[i] = std::move(scene);
      },
      parallel);

  BatchEvaluation out;
  const LossResult loss = detection_loss(raw, gt, config.loss);
  out.loss = loss.value;
  double score_sum = 0.0;
  for (const auto& dets : raw) {
    double best = 0.0;
    for (const auto& d : dets) best = std::max(best, d.confidence(config.loss.target_class));
    score_sum += best;
  }
  out.mean_max_score = n > 0 ? score_sum / static_cast<double>(n) : 0.0;
  if (!with_grad) return out;

  std::vector<Image> per_image(n, Image(patch.shape()));
  parallel_for(
      n,
      [&](std::size_t i) {
        Image g = in.detector.backward(scenes[i], loss.grads[i]);
        for (auto it = traces[i].rbegin(); it != traces[i].rend(); ++it) {
          apply_patch_backward(*it, g, per_image[i]);
        }
      },
      parallel);
  out.patch_grad = Image(patch.shape());
  for (const auto& g : per_image) out.patch_grad += g;
  return out;
}

double evaluate_final_loss(const IdoInputs& in, const Image& patch, const IdoConfig& config) {
  std::vector<std::size_t> all(in.data.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(config.seed, kEvalTag));
  const auto transforms = sample_for(in, all, config.augment, rng);
  return evaluate_patch(in, patch, config, all, transforms, false).loss;
}

IdoResult ido_run(const IdoInputs& in, const IdoConfig& config,
                  std::optional<OptimizationState> resume, const IterationCallback& on_iteration) {
  config.validate();
  in.spec.validate();
  in.data.validate();
  in.trajectory.validate();
  if (in.data.size() == 0) throw ConfigError("ido: training set is empty");
  if (!in.detector.differentiable()) throw ConfigError("ido: detector must be differentiable");

  const Shape latent = in.trajectory.start().shape();
  const int factor = in.diffusion.pixel_factor();
  if (in.spec.mask.height() != latent.height * factor || in.spec.mask.width() != latent.width * factor) {
    throw ConfigError("ido: patch mask must be the decoded latent size");
  }

  OptimizationState state;
  if (resume) {
    state = std::move(*resume);
    if (!(state.delta.shape() == latent)) throw ConfigError("ido: checkpoint does not match the latent shape");
    if (state.iteration > config.iterations) throw ConfigError("ido: checkpoint is past the iteration budget");
  } else {
    state.delta = Tensor(latent);
    state.epsilon = config.epsilon;
    state.latent_mask = config.mask_control ? downsample_mask(in.spec.mask, factor)
                                            : Mask(latent.height, latent.width, true);
  }
  state.check_invariants();

  Adam adam(config.lr);
  adam.set_state(state.adam);
  const double scale = approx_gradient_scale(in.schedule, in.trajectory.half_t);
  const std::size_t n = in.data.size();
  const auto batch = static_cast<std::size_t>(config.batch);

  auto checkpoint = [&](const std::string& name) {
    if (config.checkpoint_dir.empty()) return;
    save_checkpoint(config.checkpoint_dir / name, state, config.checkpoint_context);
  };

  while (state.iteration < config.iterations) {
    const int it = state.iteration;
    try {
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::mt19937_64 shuffle(mix_seed(config.seed, static_cast<std::uint64_t>(it), kShuffleTag));
      std::shuffle(order.begin(), order.end(), shuffle);

      Tensor delta = state.delta;
      Image first_patch;
      double loss_sum = 0.0;
      double score_sum = 0.0;
      std::size_t batches = 0;
      for (std::size_t start = 0, b = 0; start < n; start += batch, ++b) {
        const std::span<const std::size_t> chunk(order.data() + start, std::min(batch, n - start));
        std::mt19937_64 rng(mix_seed(config.seed, static_cast<std::uint64_t>(it), b + 1));
        const auto transforms = sample_for(in, chunk, config.augment, rng);

        Tensor z0;
        Image patch = generate_patch(in, delta, &z0);
        const BatchEvaluation eval = evaluate_patch(in, patch, config, chunk, transforms, true);
        if (b == 0) first_patch = patch;
        loss_sum += eval.loss;
        score_sum += eval.mean_max_score;
        ++batches;

        Tensor grad = in.diffusion.decode_vjp(z0, eval.patch_grad);
        grad *= scale;
        if (!grad.all_finite()) {
          spdlog::warn("ido: non-finite gradient at iteration {} batch {}; step skipped", it, b);
          continue;
        }
        // Descend on the detection loss.
        delta = project_delta(delta - adam.step(grad), state.epsilon, state.latent_mask);
      }
      state.delta = std::move(delta);
      state.loss_history.push_back(loss_sum / static_cast<double>(batches));
      state.score_history.push_back(score_sum / static_cast<double>(batches));
      state.adam = adam.state();
      state.iteration = it + 1;
      state.check_invariants();
      if (on_iteration) on_iteration(state, first_patch);
    } catch (const BackendError& ex) {
      spdlog::error("ido: backend failure at iteration {}: {}", it, ex.what());
      checkpoint("abort.ckpt");
      throw;
    }
    if (config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0) {
      checkpoint(fmt::format("iter-{:05d}.ckpt", state.iteration));
    }
  }

  IdoResult result;
  result.patch = generate_patch(in, state.delta);
  result.mask = in.spec.mask;
  result.final_loss = evaluate_final_loss(in, result.patch, config);
  result.state = std::move(state);
  return result;
}

void save_checkpoint(const std::filesystem::path& path, const OptimizationState& state,
                     const nlohmann::json& context) {
  Archive a;
  a.kind = "checkpoint";
  a.meta = {{"iteration", state.iteration},
            {"epsilon", state.epsilon},
            {"adam_t", state.adam.t},
            {"context", context}};
  a.tensors["delta"] = state.delta;
  a.tensors["latent_mask"] = mask_to_tensor(state.latent_mask);
  a.tensors["loss_history"] = pack_vector(state.loss_history);
  a.tensors["score_history"] = pack_vector(state.score_history);
  if (state.adam.t > 0) {
    a.tensors["adam_m"] = state.adam.m;
    a.tensors["adam_v"] = state.adam.v;
  }
  write_archive(path, a);
}

OptimizationState load_checkpoint(const std::filesystem::path& path, nlohmann::json* context) {
  const Archive a = read_archive(path);
  if (a.kind != "checkpoint") throw ConfigError(path.string() + " is not a checkpoint archive");
  OptimizationState s;
  try {
    s.iteration = a.meta.at("iteration").get<int>();
    s.epsilon = a.meta.at("epsilon").get<double>();
    s.adam.t = a.meta.at("adam_t").get<std::int64_t>();
    if (context) *context = a.meta.value("context", nlohmann::json::object());
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(path.string() + ": bad checkpoint metadata: " + ex.what());
  }
  s.delta = a.tensor("delta");
  s.latent_mask = tensor_to_mask(a.tensor("latent_mask"));
  s.loss_history = unpack_vector(a.tensor("loss_history"));
  s.score_history = unpack_vector(a.tensor("score_history"));
  if (s.adam.t > 0) {
    s.adam.m = a.tensor("adam_m");
    s.adam.v = a.tensor("adam_v");
  }
  s.check_invariants();
  return s;
}

InversionTrajectory invert_spec(const PatchSpec& spec, const NoiseSchedule& s,
                                const DiffusionBackend& backend, const InversionSettings& settings,
                                bool replace_background) {
  spec.validate();
  const Image prepared = replace_background ? apply_background(spec) : spec.reference_image;
  const Tensor z0 = backend.encode_image(prepared);
  const ConditionEmbedding cond = backend.embed_text(spec.prompt);
  const ConditionEmbedding null_text = backend.embed_text("");
  auto pivots = pivotal_invert(LatentState{z0, 0}, cond, s, settings.depth, backend,
                               settings.null_text.formula);
  return optimize_null_text(std::move(pivots), cond, null_text, s, backend, settings.null_text);
}

std::vector<RoundResult> iterative_optimize(const PatchSpec& spec, int rounds,
                                            const PipelineInputs& in,
                                            const InversionSettings& inversion,
                                            const IdoConfig& config,
                                            const RoundOptions& options) {
  if (rounds < 1) throw ConfigError("iterative_optimize: rounds must be >= 1");
  if (options.first_round < 1 || options.first_round > rounds) {
    throw ConfigError("iterative_optimize: first_round must lie in [1, rounds]");
  }
  std::vector<RoundResult> out;
  PatchSpec current = spec;
  for (int r = options.first_round; r <= rounds; ++r) {
    const bool first = r == options.first_round;
    RoundResult round;
    round.artifact_id = fmt::format("round-{:02d}", r);
    if (first && options.trajectory) {
      round.trajectory = *options.trajectory;
    } else {
      round.trajectory = invert_spec(current, in.schedule, in.diffusion, inversion, config.mask_control);
    }
    if (options.on_inverted) options.on_inverted(round.artifact_id, current, round.trajectory);

    IdoConfig round_config = config;
    if (!config.checkpoint_dir.empty()) round_config.checkpoint_dir = config.checkpoint_dir / round.artifact_id;
    round_config.checkpoint_context["round"] = r;
    const IdoInputs ido_in{round.trajectory, in.schedule, in.diffusion, in.detector, current, in.data};
    // Each round starts with fresh optimizer moments unless resuming.
    round.result = ido_run(ido_in, round_config, first ? options.resume : std::nullopt,
                           options.on_iteration);
    if (options.on_round) options.on_round(round);

    current.reference_image = round.result.patch;
    for (double& v : current.reference_image.values()) v = std::clamp(v, 0.0, 1.0);
    out.push_back(std::move(round));
  }
  return out;
}

int iterations_to_fraction(const std::vector<double>& history, double fraction) {
  if (history.empty()) return 0;
  const double first = history.front();
  const double best = *std::min_element(history.begin(), history.end());
  const double total = first - best;
  if (!(total > 0.0)) return 0;
  // Slack of a few ulps so that exact hand values like 0.9 of 1.0 hit.
  const double target = fraction * total * (1.0 - 1e-12);
  double running = first;
  for (std::size_t i = 0; i < history.size(); ++i) {
    running = std::min(running, history[i]);
    if (first - running >= target) return static_cast<int>(i);
  }
  return static_cast<int>(history.size()) - 1;
}

}  // namespace badpatch

#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <limits>

#include "badpatch/error.hpp"
#include "badpatch/ido.hpp"
#include "badpatch/toy_data.hpp"
#include "badpatch/toy_detector.hpp"
#include "badpatch/toy_diffusion.hpp"
#include "test_util.hpp"

using namespace badpatch;

namespace {

struct Stack {
  ToyLinearDiffusion diffusion;
  ToyDetector detector;
  NoiseSchedule schedule = build_schedule(1000, 0.00085, 0.012, 50);
  PatchSpec spec;
  TrainingSet data = make_toy_training_set(8, 1);
  InversionTrajectory trajectory;

  Stack() {
    spec.reference_image = make_reference_patch(16);
    spec.mask = make_disk_mask(16);
    spec.prompt = "a violet flower";
    trajectory = invert_spec(spec, schedule, diffusion, InversionSettings{});
  }

  IdoInputs inputs(const DetectorBackend& det) const {
    return IdoInputs{trajectory, schedule, diffusion, det, spec, data};
  }
  IdoInputs inputs() const { return inputs(detector); }
};

const Stack& stack() {
  static const Stack s;
  return s;
}

IdoConfig small_config(int iterations) {
  IdoConfig c;
  c.iterations = iterations;
  c.batch = 4;
  c.seed = 3;
  return c;
}

// Toy detector that fails or returns non-finite gradients on demand.
class FaultyDetector final : public DetectorBackend {
 public:
  FaultyDetector(int fail_after_calls, bool nan_gradient)
      : fail_after_(fail_after_calls), nan_gradient_(nan_gradient) {}
  std::string name() const override { return "faulty"; }
  int num_classes() const override { return inner_.num_classes(); }
  bool differentiable() const override { return true; }
  double confidence_threshold() const override { return inner_.confidence_threshold(); }
  Detections detect_raw(const Image& image) const override {
    if (fail_after_ >= 0 && calls_++ >= fail_after_) throw BackendError("injected failure");
    return inner_.detect_raw(image);
  }
  Image backward(const Image& image, std::span<const DetectionGrad> grads) const override {
    Image g = inner_.backward(image, grads);
    if (nan_gradient_) g.fill(std::numeric_limits<double>::quiet_NaN());
    return g;
  }

 private:
  ToyDetector inner_;
  int fail_after_;
  bool nan_gradient_;
  mutable std::atomic<int> calls_ = 0;
};

}  // namespace

TEST(GradientScale, Examples) {
  const auto s = NoiseSchedule::from_betas({0.1, 0.1}, 2);
  EXPECT_EQ(approx_gradient_scale(s, 0), 1.0);
  EXPECT_NEAR(approx_gradient_scale(s, 2), std::sqrt(1.0 / 0.81), 1e-15);
  EXPECT_NEAR(approx_gradient_scale(s, 2), 1.0 / 0.9, 1e-15);
  EXPECT_THROW(approx_gradient_scale(s, 3), ConfigError);
}

TEST(GradientScale, TelescopesForRandomSchedules) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(1e-4, 0.03);
  std::uniform_int_distribution<int> steps(1, 60);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> betas(200);
    for (double& b : betas) b = u(rng);
    const auto s = NoiseSchedule::from_betas(betas, steps(rng));
    for (int depth = 0; depth <= s.ddim_steps(); ++depth) {
      double product = 1.0;
      for (int k = 1; k <= depth; ++k) product *= std::sqrt(s.level_alpha(k - 1) / s.level_alpha(k));
      const double closed = std::sqrt(1.0 / s.level_alpha(depth));
      EXPECT_NEAR(product, closed, 1e-12) << trial << " depth " << depth;
      EXPECT_NEAR(approx_gradient_scale(s, depth), closed, 1e-12);
    }
  }
}

TEST(Projection, Examples) {
  const Mask all(1, 3, true);
  const Tensor inside({1, 1, 3}, std::vector<double>{0.1, -0.2, 0.5});
  EXPECT_EQ(project_delta(inside, 0.5, all), inside);
  const Tensor big({1, 1, 3}, std::vector<double>{0.9, -0.9, 0.3});
  EXPECT_EQ(project_delta(big, 0.5, all), (Tensor({1, 1, 3}, std::vector<double>{0.5, -0.5, 0.3})));
  Mask partial(1, 3, true);
  partial.set(0, 1, false);
  const Tensor p = project_delta(big, 0.5, partial);
  EXPECT_EQ(p[1], 0.0);
  EXPECT_EQ(p[0], 0.5);
}

TEST(Projection, MaskAppliesToEveryChannel) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    Mask m(4, 4);
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) m.set(y, x, rng() % 2 == 0);
    }
    const Tensor d = testutil::random_tensor({3, 4, 4}, trial, -2.0, 2.0);
    const Tensor p = project_delta(d, 0.5, m);
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) {
          if (!m(y, x)) {
            EXPECT_EQ(p(c, y, x), 0.0);
          } else {
            EXPECT_EQ(p(c, y, x), std::clamp(d(c, y, x), -0.5, 0.5));
          }
        }
      }
    }
  }
}

TEST(Ido, ZeroLearningRateKeepsReconstruction) {
  const auto& s = stack();
  IdoConfig c = small_config(3);
  c.lr = 0.0;
  const auto r = ido_run(s.inputs(), c);
  EXPECT_EQ(r.state.delta.max_abs(), 0.0);
  EXPECT_EQ(r.patch, generate_patch(s.inputs(), Tensor(s.trajectory.start().shape())));
  EXPECT_LT(relative_error(r.patch, apply_background(s.spec), apply_background(s.spec)), 1e-3);
  EXPECT_EQ(r.state.loss_history.size(), 3u);
}

TEST(Ido, ProjectionInvariantAfterEveryStep) {
  const auto& s = stack();
  IdoConfig c = small_config(30);
  c.lr = 0.2;
  double peak = 0.0;
  int calls = 0;
  const auto r = ido_run(s.inputs(), c, std::nullopt, [&](const OptimizationState& st, const Image&) {
    ++calls;
    EXPECT_LE(st.delta.max_abs(), c.epsilon);
    for (int ch = 0; ch < st.delta.shape().channels; ++ch) {
      for (int y = 0; y < st.latent_mask.height(); ++y) {
        for (int x = 0; x < st.latent_mask.width(); ++x) {
          if (!st.latent_mask(y, x)) {
            EXPECT_EQ(st.delta(ch, y, x), 0.0);
          }
        }
      }
    }
    peak = std::max(peak, st.delta.max_abs());
  });
  EXPECT_EQ(calls, 30);
  // The large step size drives some components onto the boundary.
  EXPECT_EQ(peak, c.epsilon);
  EXPECT_NO_THROW(r.state.check_invariants());
}

TEST(Ido, MaskControlFreezesBackgroundPixels) {
  const auto& s = stack();
  for (bool control : {true, false}) {
    IdoConfig c = small_config(8);
    c.lr = 0.05;
    c.mask_control = control;
    std::vector<Image> patches;
    ido_run(s.inputs(), c, std::nullopt, [&](const OptimizationState&, const Image& p) { patches.push_back(p); });
    ASSERT_EQ(patches.size(), 8u);
    bool identical = true;
    for (const auto& p : patches) {
      for (int ch = 0; ch < 3; ++ch) {
        for (int y = 0; y < 16; ++y) {
          for (int x = 0; x < 16; ++x) {
            if (!s.spec.mask(y, x) && p(ch, y, x) != patches.front()(ch, y, x)) identical = false;
          }
        }
      }
    }
    EXPECT_EQ(identical, control) << "mask_control=" << control;
  }
}

TEST(Ido, ResumeFromCheckpointIsBitExact) {
  const auto& s = stack();
  const auto dir = testutil::temp_dir("ido-resume");
  IdoConfig c = small_config(10);
  c.checkpoint_every = 5;
  c.checkpoint_dir = dir;
  c.checkpoint_context = {{"tag", "x"}};
  const auto full = ido_run(s.inputs(), c);
  ASSERT_TRUE(std::filesystem::exists(dir / "iter-00005.ckpt"));
  ASSERT_TRUE(std::filesystem::exists(dir / "iter-00010.ckpt"));

  nlohmann::json context;
  OptimizationState mid = load_checkpoint(dir / "iter-00005.ckpt", &context);
  EXPECT_EQ(context.at("tag"), "x");
  EXPECT_EQ(mid.iteration, 5);
  c.checkpoint_dir.clear();
  const auto resumed = ido_run(s.inputs(), c, std::move(mid));
  EXPECT_EQ(resumed.patch, full.patch);
  EXPECT_EQ(resumed.state.delta, full.state.delta);
  EXPECT_EQ(resumed.state.loss_history, full.state.loss_history);
  EXPECT_EQ(resumed.final_loss, full.final_loss);
}

TEST(Ido, BackendFailureWritesAbortCheckpoint) {
  const auto& s = stack();
  const auto dir = testutil::temp_dir("ido-abort");
  // Two batches of four images per iteration: fail during the third iteration.
  const FaultyDetector faulty(20, false);
  IdoConfig c = small_config(10);
  c.checkpoint_dir = dir;
  EXPECT_THROW(ido_run(s.inputs(faulty), c), BackendError);
  ASSERT_TRUE(std::filesystem::exists(dir / "abort.ckpt"));
  const auto st = load_checkpoint(dir / "abort.ckpt");
  EXPECT_EQ(st.iteration, 2);
  EXPECT_EQ(st.loss_history.size(), 2u);
}

TEST(Ido, NonFiniteGradientSkipsStep) {
  const auto& s = stack();
  const FaultyDetector nan_grad(-1, true);
  const auto r = ido_run(s.inputs(nan_grad), small_config(3));
  EXPECT_EQ(r.state.delta.max_abs(), 0.0);
  EXPECT_EQ(r.state.loss_history.size(), 3u);
}

TEST(Ido, Deterministic) {
  const auto& s = stack();
  const auto a = ido_run(s.inputs(), small_config(4));
  const auto b = ido_run(s.inputs(), small_config(4));
  EXPECT_EQ(a.patch, b.patch);
  EXPECT_EQ(a.state.loss_history, b.state.loss_history);
}

TEST(Ido, ConfigValidation) {
  IdoConfig c;
  c.epsilon = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.batch = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  OptimizationState st;
  st.delta = Tensor({1, 1, 2}, 0.6);
  st.latent_mask = Mask(1, 2, true);
  EXPECT_THROW(st.check_invariants(), NumericError);
}

TEST(Ido, IterationsToFraction) {
  EXPECT_EQ(iterations_to_fraction({}, 0.9), 0);
  EXPECT_EQ(iterations_to_fraction({1.0, 1.0}, 0.9), 0);
  EXPECT_EQ(iterations_to_fraction({1.0, 0.5, 0.2, 0.1, 0.0}, 0.9), 3);
  EXPECT_EQ(iterations_to_fraction({1.0, 0.0, 0.5, 0.5}, 0.9), 1);
  EXPECT_EQ(iterations_to_fraction({1.0, 0.6, 0.7, 0.5, 0.4}, 0.5), 1);
  EXPECT_EQ(iterations_to_fraction({1.0, 0.8, 0.9, 0.5, 0.4}, 0.75), 3);
}

TEST(Rounds, SingleRoundMatchesSingleRun) {
  const auto& s = stack();
  const IdoConfig c = small_config(4);
  const PipelineInputs pin{s.schedule, s.diffusion, s.detector, s.data};
  const auto rounds = iterative_optimize(s.spec, 1, pin, InversionSettings{}, c);
  ASSERT_EQ(rounds.size(), 1u);
  const auto single = ido_run(s.inputs(), c);
  EXPECT_EQ(rounds[0].result.patch, single.patch);
  EXPECT_EQ(rounds[0].result.final_loss, single.final_loss);
  EXPECT_THROW(iterative_optimize(s.spec, 0, pin, InversionSettings{}, c), ConfigError);
}

TEST(Rounds, EachRoundFeedsTheNext) {
  const auto& s = stack();
  const IdoConfig c = small_config(4);
  const PipelineInputs pin{s.schedule, s.diffusion, s.detector, s.data};
  std::vector<std::string> ids;
  std::vector<Image> references;
  RoundOptions opts;
  opts.on_inverted = [&](const std::string& id, const PatchSpec& spec, const InversionTrajectory&) {
    ids.push_back(id);
    references.push_back(spec.reference_image);
  };
  const auto rounds = iterative_optimize(s.spec, 3, pin, InversionSettings{}, c, opts);
  ASSERT_EQ(rounds.size(), 3u);
  EXPECT_EQ(ids, (std::vector<std::string>{"round-01", "round-02", "round-03"}));
  EXPECT_EQ(references[0], s.spec.reference_image);
  for (int r = 1; r < 3; ++r) {
    Image expected = rounds[static_cast<std::size_t>(r) - 1].result.patch;
    for (double& v : expected.values()) v = std::clamp(v, 0.0, 1.0);
    EXPECT_EQ(references[static_cast<std::size_t>(r)], expected);
  }
}

TEST(Rounds, CheckpointsGoToPerRoundDirectories) {
  const auto& s = stack();
  const auto dir = testutil::temp_dir("rounds-ckpt");
  IdoConfig c = small_config(2);
  c.checkpoint_every = 2;
  c.checkpoint_dir = dir;
  const PipelineInputs pin{s.schedule, s.diffusion, s.detector, s.data};
  iterative_optimize(s.spec, 2, pin, InversionSettings{}, c);
  for (int r : {1, 2}) {
    nlohmann::json ctx;
    const auto path = dir / ("round-0" + std::to_string(r)) / "iter-00002.ckpt";
    ASSERT_TRUE(std::filesystem::exists(path)) << path;
    load_checkpoint(path, &ctx);
    EXPECT_EQ(ctx.at("round"), r);
  }
}

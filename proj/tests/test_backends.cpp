#include <gtest/gtest.h>

#include <atomic>
#include <cmath>

#include "badpatch/backends.hpp"
#include "badpatch/losses.hpp"
#include "badpatch/toy_data.hpp"
#include "badpatch/toy_detector.hpp"
#include "badpatch/toy_diffusion.hpp"
#include "test_util.hpp"

using namespace badpatch;

namespace {

// Flips the sign of the wrapped detector's gradient.
class NegatedDetector final : public DetectorBackend {
 public:
  explicit NegatedDetector(const DetectorBackend& inner) : inner_(inner) {}
  std::string name() const override { return "negated"; }
  int num_classes() const override { return inner_.num_classes(); }
  bool differentiable() const override { return true; }
  double confidence_threshold() const override { return inner_.confidence_threshold(); }
  Detections detect_raw(const Image& image) const override { return inner_.detect_raw(image); }
  Image backward(const Image& image, std::span<const DetectionGrad> grads) const override {
    return inner_.backward(image, grads) * -1.0;
  }

 private:
  const DetectorBackend& inner_;
};

class FrozenDetector final : public DetectorBackend {
 public:
  std::string name() const override { return "frozen"; }
  int num_classes() const override { return 1; }
  bool differentiable() const override { return false; }
  double confidence_threshold() const override { return 0.0; }
  Detections detect_raw(const Image&) const override { return {}; }
};

// A fixed linear functional of every raw detector output.
double probe_loss(const Detections& dets, const std::vector<DetectionGrad>& weights) {
  double total = 0.0;
  for (std::size_t k = 0; k < dets.size(); ++k) {
    total += weights[k].d_obj * dets[k].p_obj;
    for (std::size_t c = 0; c < dets[k].p_cls.size(); ++c) total += weights[k].d_cls[c] * dets[k].p_cls[c];
  }
  return total;
}

}  // namespace

TEST(Registry, RegisterResolveList) {
  Registry<DetectorBackend> r;
  r.register_backend("frozen", [](const nlohmann::json&) { return std::make_unique<FrozenDetector>(); });
  r.register_backend("toy", [](const nlohmann::json&) { return std::make_unique<ToyDetector>(); });
  EXPECT_TRUE(r.contains("frozen"));
  EXPECT_EQ(r.create("frozen")->name(), "frozen");
  EXPECT_EQ(r.names(), (std::vector<std::string>{"frozen", "toy"}));
  EXPECT_THROW(r.resolve("missing"), ConfigError);
  EXPECT_THROW(r.register_backend("toy", [](const nlohmann::json&) { return std::make_unique<ToyDetector>(); }),
               ConfigError);
}

TEST(Registry, GlobalRegistriesHaveToyBackends) {
  EXPECT_EQ(diffusion_registry().create("toy-linear")->name(), "toy-linear");
  EXPECT_EQ(detector_registry().create("toy-detector")->name(), "toy-detector");
  EXPECT_EQ(similarity_registry().create("toy-histogram")->name(), "toy-histogram");
  const auto custom = detector_registry().create("toy-detector", {{"seed", 3}, {"jitter", 0.0}});
  EXPECT_EQ(dynamic_cast<const ToyDetector&>(*custom).params().seed, 3u);
}

TEST(Plugins, LoadFromSearchPath) {
  EXPECT_EQ(load_plugins(std::string("/nonexistent:") + BADPATCH_PLUGIN_DIR), 1);
  ASSERT_TRUE(detector_registry().contains("plugin-constant"));
  const auto det = detector_registry().create("plugin-constant", {{"score", 0.3}});
  const Image img(Shape{3, 8, 8}, 0.5);
  const auto out = det->detect(std::span<const Image>(&img, 1));
  ASSERT_EQ(out.front().size(), 1u);
  EXPECT_DOUBLE_EQ(out.front().front().confidence(0), 0.3);
  EXPECT_EQ(load_plugins(""), 0);
}

TEST(ToyDiffusion, DeterministicAndSeeded) {
  const ToyLinearDiffusion a, b;
  ToyDiffusionParams p;
  p.seed = 8;
  const ToyLinearDiffusion c(p);
  const Tensor z = testutil::random_tensor(a.latent_shape(), 1);
  const auto e = a.embed_text("a violet flower");
  EXPECT_EQ(a.predict_noise(z, 500, e), b.predict_noise(z, 500, e));
  EXPECT_EQ(a.embed_text("x"), b.embed_text("x"));
  EXPECT_NE(a.predict_noise(z, 500, e), c.predict_noise(z, 500, e));
  EXPECT_NE(a.embed_text("a violet flower"), a.embed_text("a red flower"));
  for (int t = 0; t < a.train_steps(); ++t) EXPECT_LE(std::abs(a.slope(t)), 0.5);
  EXPECT_EQ(a.decode_latent(a.encode_image(z)), z);
}

TEST(ToyDiffusion, EmbeddingVjpMatchesFiniteDifferences) {
  const ToyLinearDiffusion m;
  const Tensor z = testutil::random_tensor(m.latent_shape(), 2);
  const Tensor upstream = testutil::random_tensor(m.latent_shape(), 3);
  const auto e = m.embed_text("a violet flower");
  const auto g = m.noise_embedding_vjp(z, 321, e, upstream);
  const double h = 1e-6;
  for (std::size_t i = 0; i < e.e.size(); ++i) {
    ConditionEmbedding plus = e, minus = e;
    plus.e[i] += h;
    minus.e[i] -= h;
    const double fd =
        (dot(upstream, m.predict_noise(z, 321, plus)) - dot(upstream, m.predict_noise(z, 321, minus))) / (2 * h);
    EXPECT_NEAR(g.e[i], fd, 1e-7 * std::max(1.0, std::abs(fd)));
  }
  EXPECT_EQ(m.decode_vjp(z, upstream), upstream);
}

TEST(ToyDetector, DeterministicScoresInUnitInterval) {
  const ToyDetector d;
  const ToyScene scene = make_toy_scene(4);
  const auto a = d.detect_raw(scene.image);
  const auto b = ToyDetector().detect_raw(scene.image);
  ASSERT_FALSE(a.empty());
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].p_obj, b[k].p_obj);
    EXPECT_EQ(a[k].p_cls, b[k].p_cls);
    EXPECT_GT(a[k].p_obj, 0.0);
    EXPECT_LT(a[k].p_obj, 1.0);
    EXPECT_GT(a[k].box.w, 0.0);
    EXPECT_GT(a[k].box.h, 0.0);
  }
}

TEST(ToyDetector, FindsToyPersons) {
  const ToyDetector d;
  const TrainingSet set = make_toy_training_set(16, 3);
  int found = 0, total = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto dets = d.detect(std::span<const Image>(&set.images[i], 1)).front();
    for (const Box& gt : set.person_boxes[i]) {
      ++total;
      for (const auto& det : dets) {
        if (det.confidence(0) > 0.5 && iou(det.box, gt) > 0.5) {
          ++found;
          break;
        }
      }
    }
  }
  EXPECT_GE(found, total * 3 / 4) << found << "/" << total;
}

TEST(ToyDetector, GradientMatchesFiniteDifferences) {
  const ToyDetector d;
  const ToyScene scene = make_toy_scene(21);
  const Detections dets = d.detect_raw(scene.image);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<DetectionGrad> weights(dets.size());
  for (auto& w : weights) w = {n(rng), {n(rng), n(rng)}};
  const Image grad = d.backward(scene.image, weights);

  const Box& person = scene.persons.front();
  std::uniform_int_distribution<int> px(static_cast<int>(person.x), static_cast<int>(person.x + person.w) - 1);
  std::uniform_int_distribution<int> py(static_cast<int>(person.y), static_cast<int>(person.y + person.h) - 1);
  const double h = 1e-6;
  for (int probe = 0; probe < 20; ++probe) {
    const int c = static_cast<int>(rng() % 3), y = py(rng), x = px(rng);
    Image plus = scene.image, minus = scene.image;
    plus(c, y, x) += h;
    minus(c, y, x) -= h;
    const double fd = (probe_loss(d.detect_raw(plus), weights) - probe_loss(d.detect_raw(minus), weights)) / (2 * h);
    const double an = grad(c, y, x);
    const double scale = std::max(std::abs(fd), std::abs(an));
    ASSERT_GT(scale, 1e-6) << "probe " << probe << " has no signal";
    EXPECT_LE(std::abs(fd - an) / scale, 1e-4) << c << "," << y << "," << x << ": " << an << " vs " << fd;
  }
}

TEST(Ensemble, AveragesDetectorGradients) {
  const ToyDetector d;
  const TrainingSet set = make_toy_training_set(2, 9);
  const LossConfig cfg;
  const std::vector<const DetectorBackend*> one{&d};
  const auto g1 = ensemble_gradient(one, set.images, set.person_boxes, cfg);

  std::vector<Detections> raw;
  for (const auto& img : set.images) raw.push_back(d.detect_raw(img));
  const LossResult loss = detection_loss(raw, set.person_boxes, cfg);
  for (std::size_t i = 0; i < set.size(); ++i) {
    EXPECT_EQ(g1[i], d.backward(set.images[i], loss.grads[i]));
    EXPECT_GT(g1[i].max_abs(), 0.0);
  }

  const ToyDetector twin;
  const std::vector<const DetectorBackend*> two{&d, &twin};
  const auto g2 = ensemble_gradient(two, set.images, set.person_boxes, cfg);
  for (std::size_t i = 0; i < set.size(); ++i) EXPECT_LT(testutil::max_abs_diff(g1[i], g2[i]), 1e-15);

  const NegatedDetector neg(d);
  const std::vector<const DetectorBackend*> opposed{&d, &neg};
  const auto g0 = ensemble_gradient(opposed, set.images, set.person_boxes, cfg);
  for (const auto& g : g0) EXPECT_EQ(g.max_abs(), 0.0);
}

TEST(Ensemble, RejectsNonDifferentiable) {
  const ToyDetector d;
  const FrozenDetector f;
  const std::vector<const DetectorBackend*> dets{&d, &f};
  const std::vector<Image> images{Image(Shape{3, 8, 8})};
  const std::vector<std::vector<Box>> gt{{}};
  EXPECT_THROW(ensemble_gradient(dets, images, gt, LossConfig{}), ConfigError);
  EXPECT_THROW(ensemble_gradient({}, images, gt, LossConfig{}), ConfigError);
  EXPECT_THROW(f.backward(images[0], {}), BackendError);
}

TEST(ParallelFor, SameResultEitherWay) {
  std::vector<int> a(100), b(100);
  parallel_for(a.size(), [&](std::size_t i) { a[i] = static_cast<int>(i * i); }, false);
  parallel_for(b.size(), [&](std::size_t i) { b[i] = static_cast<int>(i * i); }, true);
  EXPECT_EQ(a, b);
  std::atomic<int> calls = 0;
  parallel_for(0, [&](std::size_t) { ++calls; }, true);
  EXPECT_EQ(calls.load(), 0);
}

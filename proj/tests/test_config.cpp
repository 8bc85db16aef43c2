#include <gtest/gtest.h>

#include <fstream>

#include "badpatch/config.hpp"
#include "badpatch/error.hpp"
#include "test_util.hpp"

using namespace badpatch;

TEST(Config, DefaultsAreReferenceHyperparameters) {
  const RunConfig c;
  EXPECT_EQ(c.schedule.ddim_steps, 50);
  EXPECT_EQ(c.effective_depth(), 25);
  EXPECT_EQ(c.null_text.n_inner, 10);
  EXPECT_EQ(c.null_text.lr, 0.01);
  EXPECT_EQ(c.null_text.w, 7.5);
  EXPECT_EQ(c.ido.lr, 0.003);
  EXPECT_EQ(c.ido.epsilon, 0.5);
  EXPECT_EQ(c.ido.iterations, 200);
  EXPECT_EQ(c.ido.batch, 32);
  EXPECT_EQ(c.ido.tau, 0.2);
  EXPECT_EQ(c.ido.loss.iou_threshold, 0.5);
  EXPECT_EQ(c.ido.loss.kind, LossKind::iou_detection);
  EXPECT_EQ(c.rounds, 2);
  EXPECT_EQ(c.eval.confidence, 0.5);
  EXPECT_EQ(c.eval.iou, 0.5);
  EXPECT_EQ(c.schedule.beta_min, 0.00085);
  EXPECT_EQ(c.schedule.beta_max, 0.012);
  EXPECT_EQ(c.schedule.train_steps, 1000);
  EXPECT_EQ(c.schedule.formula, DdimFormula::standard);
  EXPECT_EQ(c.background, (Rgb{0.5, 0.5, 0.5}));
}

TEST(Config, EmptyDocumentGivesDefaults) {
  const RunConfig a = RunConfig::from_json(nlohmann::json::object());
  EXPECT_EQ(a.to_json(), RunConfig{}.to_json());
  EXPECT_EQ(RunConfig::from_json(a.to_json()).to_json(), a.to_json());
}

TEST(Config, Overrides) {
  nlohmann::json doc = nlohmann::json::object();
  apply_override(doc, "ido.iterations=7");
  apply_override(doc, "ido.loss=common_detection");
  apply_override(doc, "render.background=[0.1,0.2,0.3]");
  apply_override(doc, "inversion.depth=10");
  const RunConfig c = RunConfig::from_json(doc);
  EXPECT_EQ(c.ido.iterations, 7);
  EXPECT_EQ(c.ido.loss.kind, LossKind::common_detection);
  EXPECT_EQ(c.background, (Rgb{0.1, 0.2, 0.3}));
  EXPECT_EQ(c.effective_depth(), 10);
  EXPECT_THROW(apply_override(doc, "no-equals-sign"), ConfigError);
}

TEST(Config, RejectsUnknownKeysAndBadRanges) {
  EXPECT_THROW(RunConfig::from_json({{"ido", {{"learning_rate", 0.1}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"bogus", 1}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"schedule", {{"formula", "euler"}}}}), ConfigError);

  RunConfig c = RunConfig::from_json({{"ido", {{"epsilon", -1.0}}}});
  EXPECT_THROW(c.validate(false), ConfigError);
  c = RunConfig::from_json({{"schedule", {{"beta_min", 0.02}, {"beta_max", 0.01}}}});
  EXPECT_THROW(c.validate(false), ConfigError);
  c = RunConfig::from_json({{"inversion", {{"depth", 60}}}});
  EXPECT_THROW(c.validate(false), ConfigError);
  c = RunConfig::from_json({{"ido", {{"iou_threshold", 1.0}}}});
  EXPECT_THROW(c.validate(false), ConfigError);
}

TEST(Config, FileChecksAndRelativePaths) {
  const auto dir = testutil::temp_dir("config");
  std::filesystem::create_directories(dir / "conf");
  {
    std::ofstream out(dir / "conf" / "run.json");
    out << R"({"data": {"train": "../train.jsonl"},
              "eval": {"datasets": [{"id": "a", "manifest": "../a.jsonl"}]}})";
  }
  const RunConfig c = load_run_config(dir / "conf" / "run.json");
  EXPECT_EQ(std::filesystem::weakly_canonical(c.train_manifest), std::filesystem::weakly_canonical(dir / "train.jsonl"));
  EXPECT_THROW(c.validate(true), ConfigError);
  std::ofstream(dir / "train.jsonl") << "";
  EXPECT_THROW(c.validate(true), ConfigError);
  std::ofstream(dir / "a.jsonl") << "";
  EXPECT_NO_THROW(c.validate(true));

  EXPECT_THROW(load_run_config(dir / "missing.json"), ConfigError);
  {
    std::ofstream out(dir / "broken.json");
    out << "{ not json";
  }
  EXPECT_THROW(load_run_config(dir / "broken.json"), ConfigError);
}

TEST(Config, DuplicateDatasetIdsRejected) {
  const RunConfig c = RunConfig::from_json(
      {{"eval", {{"datasets", {{{"id", "a"}, {"manifest", "x"}}, {{"id", "a"}, {"manifest", "y"}}}}}}});
  EXPECT_THROW(c.validate(false), ConfigError);
}

TEST(Config, HashIsStableAndIgnoresOutputSettings) {
  const RunConfig base;
  EXPECT_EQ(base.hash(), RunConfig{}.hash());
  EXPECT_EQ(base.hash_hex().size(), 16u);

  auto variant = [](const std::string& assignment) {
    nlohmann::json doc = nlohmann::json::object();
    apply_override(doc, assignment);
    return RunConfig::from_json(doc).hash();
  };
  EXPECT_EQ(variant("output_dir=\"elsewhere\""), base.hash());
  EXPECT_EQ(variant("ido.parallel=true"), base.hash());
  EXPECT_EQ(variant("ido.checkpoint_every=7"), base.hash());
  EXPECT_EQ(variant("eval.parallel=true"), base.hash());
  EXPECT_NE(variant("seed=1"), base.hash());
  EXPECT_NE(variant("ido.epsilon=0.25"), base.hash());
  EXPECT_NE(variant("backends.detector.params={\"seed\": 4}"), base.hash());
}

TEST(Config, ExampleConfigParses) {
  const auto path = std::filesystem::path(BADPATCH_SOURCE_DIR) / "configs" / "toy.json";
  const RunConfig c = load_run_config(path);
  EXPECT_NO_THROW(c.validate(false));
  EXPECT_EQ(c.ido.checkpoint_every, 50);
  ASSERT_EQ(c.datasets.size(), 1u);
  EXPECT_EQ(c.datasets[0].id, "toy-test");
}

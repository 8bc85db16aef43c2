#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "badpatch/commands.hpp"
#include "badpatch/image_io.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace badpatch;

namespace {

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + BADPATCH_CLI + "\" -q " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Toy data and a small-budget setting shared by every CLI test.
struct CliEnv {
  fs::path root = testutil::temp_dir("cli");
  fs::path train, test;
  std::string fast = " -s ido.iterations=4 -s ido.batch=8 -s ido.rounds=1 -s ido.checkpoint_every=2"
                     " -s inversion.depth=10";

  CliEnv() {
    const fs::path log = root / "setup.log";
    EXPECT_EQ(run_cli("toy-data --out \"" + (root / "train").string() + "\" --count 8 --seed 1", log), 0);
    EXPECT_EQ(run_cli("toy-data --out \"" + (root / "test").string() + "\" --count 8 --seed 2", log), 0);
    train = root / "train" / "manifest.jsonl";
    test = root / "test" / "manifest.jsonl";
  }

  std::string invert_args(const fs::path& run_dir, const fs::path& mask) const {
    return "invert --image \"" + (root / "train" / "reference.png").string() + "\" --mask \"" + mask.string() +
           "\" --prompt \"a violet flower\" --run-dir \"" + run_dir.string() + "\"" + fast;
  }
  fs::path mask() const { return root / "train" / "mask.png"; }
};

const CliEnv& env() {
  static const CliEnv e;
  return e;
}

}  // namespace

TEST(Cli, InvertWritesDeterministicArtifacts) {
  const auto& e = env();
  const fs::path a = e.root / "inv-a", b = e.root / "inv-b";
  ASSERT_EQ(run_cli(e.invert_args(a, e.mask()), e.root / "inv-a.log"), 0) << read_file(e.root / "inv-a.log");
  ASSERT_EQ(run_cli(e.invert_args(b, e.mask()), e.root / "inv-b.log"), 0);
  for (const char* sub : {"trajectory/trajectory.bpa", "trajectory/reconstruction.png", "reports/reconstruction.json",
                          "config.json", "plots/null_text_objective.png"}) {
    EXPECT_TRUE(fs::exists(a / sub)) << sub;
  }
  EXPECT_EQ(read_file(a / "trajectory/trajectory.bpa"), read_file(b / "trajectory/trajectory.bpa"));
  const auto report = nlohmann::json::parse(read_file(a / "reports/reconstruction.json"));
  EXPECT_LT(report.at("reconstruction_error").get<double>(), 1e-3);
  EXPECT_EQ(run_cli("validate \"" + (a / "trajectory/trajectory.bpa").string() + "\"", e.root / "v.log"), 0);
}

TEST(Cli, ValidationErrorsExitTwoBeforeCompute) {
  const auto& e = env();
  const fs::path run = e.root / "no-mask";
  EXPECT_EQ(run_cli(e.invert_args(run, e.root / "missing-mask.png"), e.root / "nm.log"), 2);
  EXPECT_FALSE(fs::exists(run));
  EXPECT_EQ(run_cli(e.invert_args(e.root / "bad-key", e.mask()) + " -s ido.bogus=1", e.root / "bk.log"), 2);
  EXPECT_EQ(run_cli(e.invert_args(e.root / "bad-eps", e.mask()) + " -s ido.epsilon=-1", e.root / "be.log"), 2);
  EXPECT_FALSE(fs::exists(e.root / "bad-eps"));
  EXPECT_EQ(run_cli("frobnicate", e.root / "fr.log"), 2);
  EXPECT_EQ(run_cli("optimize --trajectory \"" + (e.root / "nope.bpa").string() + "\"", e.root / "op.log"), 2);
}

TEST(Cli, ZeroIterationsPatchIsReconstruction) {
  const auto& e = env();
  const fs::path inv = e.root / "zero-inv", opt = e.root / "zero-opt";
  ASSERT_EQ(run_cli(e.invert_args(inv, e.mask()), e.root / "zi.log"), 0);
  ASSERT_EQ(run_cli("optimize --trajectory \"" + (inv / "trajectory/trajectory.bpa").string() + "\" --dataset \"" +
                        e.train.string() + "\" --run-dir \"" + opt.string() + "\"" + e.fast +
                        " -s ido.iterations=0",
                    e.root / "zo.log"),
            0)
      << read_file(e.root / "zo.log");
  const auto [patch, mask] = load_rgba_patch(opt / "patch/patch.png");
  const Image recon = load_image(inv / "trajectory/reconstruction.png");
  const Mask ref_mask = load_mask(e.mask());
  EXPECT_EQ(mask, ref_mask);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < 16; ++y) {
      for (int x = 0; x < 16; ++x) EXPECT_EQ(patch(c, y, x), recon(c, y, x));
    }
  }
}

TEST(Cli, ResumeReproducesUninterruptedRun) {
  const auto& e = env();
  const fs::path inv = e.root / "res-inv", full = e.root / "res-full", resumed = e.root / "res-resumed";
  ASSERT_EQ(run_cli(e.invert_args(inv, e.mask()), e.root / "ri.log"), 0);
  const std::string common = " --dataset \"" + e.train.string() + "\"" + e.fast;
  ASSERT_EQ(run_cli("optimize --trajectory \"" + (inv / "trajectory/trajectory.bpa").string() + "\" --run-dir \"" +
                        full.string() + "\"" + common,
                    e.root / "rf.log"),
            0)
      << read_file(e.root / "rf.log");
  const fs::path ckpt = full / "checkpoints/round-01/iter-00002.ckpt";
  ASSERT_TRUE(fs::exists(ckpt));
  ASSERT_EQ(run_cli("optimize --resume \"" + ckpt.string() + "\" --run-dir \"" + resumed.string() + "\"" + common,
                    e.root / "rr.log"),
            0)
      << read_file(e.root / "rr.log");
  EXPECT_EQ(read_file(full / "patch/patch.png"), read_file(resumed / "patch/patch.png"));
  EXPECT_EQ(read_file(full / "reports/loss.csv"), read_file(resumed / "reports/loss.csv"));
  EXPECT_EQ(read_file(full / "checkpoints/round-01/iter-00004.ckpt"),
            read_file(resumed / "checkpoints/round-01/iter-00004.ckpt"));

  // A checkpoint from a different config is refused.
  EXPECT_EQ(run_cli("optimize --resume \"" + ckpt.string() + "\" --run-dir \"" + (e.root / "res-bad").string() +
                        "\"" + common + " -s ido.epsilon=0.25",
                    e.root / "rb.log"),
            2);

  // Evaluation of the optimized patch and of the gray control.
  const std::string ds = " --dataset \"toy-test=" + e.test.string() + "\"";
  ASSERT_EQ(run_cli("evaluate --patch \"" + (full / "patch/patch.png").string() + "\" --run-dir \"" +
                        (e.root / "eval").string() + "\"" + ds,
                    e.root / "ev.log"),
            0)
      << read_file(e.root / "ev.log");
  ASSERT_EQ(run_cli("evaluate --gray 16 --run-dir \"" + (e.root / "eval-gray").string() + "\"" + ds,
                    e.root / "eg.log"),
            0);
  const auto report = nlohmann::json::parse(read_file(e.root / "eval/reports/eval.json"));
  EXPECT_TRUE(check_report(report).empty());
  EXPECT_EQ(report.at("patch_id").get<std::string>().rfind("patch-", 0), 0u);
  const auto gray = nlohmann::json::parse(read_file(e.root / "eval-gray/reports/eval.json"));
  EXPECT_EQ(gray.at("patch_id"), "gray-16");
  EXPECT_TRUE(check_report(gray).empty());
  EXPECT_EQ(run_cli("report \"" + (e.root / "eval").string() + "\" \"" + (e.root / "eval-gray").string() + "\"",
                    e.root / "rp.log"),
            0);
  const std::string table = read_file(e.root / "rp.log");
  EXPECT_NE(table.find("toy-test"), std::string::npos);
  EXPECT_NE(table.find("gray-16"), std::string::npos);
  for (const fs::path& artifact : {full / "patch/patch.json", full / "config.json", e.root / "eval/reports/eval.json",
                                  full / "checkpoints/round-01/iter-00004.ckpt"}) {
    EXPECT_EQ(run_cli("validate \"" + artifact.string() + "\"", e.root / "va.log"), 0)
        << artifact << read_file(e.root / "va.log");
  }

  // Cross-check against an external validator when one is installed.
  if (std::system("python3 -c 'import jsonschema' > /dev/null 2>&1") == 0) {
    const std::string py = "python3 -c 'import json,sys,jsonschema; jsonschema.validate(json.load(open(sys.argv[1])), "
                           "json.load(open(sys.argv[2])))' \"" +
                           (e.root / "eval/reports/eval.json").string() + "\" \"" + BADPATCH_SOURCE_DIR +
                           "/docs/report.schema.json\"";
    EXPECT_EQ(std::system(py.c_str()), 0);
  }
}

TEST(Cli, PublishedSchemaMatchesEmbeddedSchema) {
  const auto published =
      nlohmann::json::parse(read_file(fs::path(BADPATCH_SOURCE_DIR) / "docs" / "report.schema.json"));
  EXPECT_EQ(published, report_schema());
}

TEST(Cli, ReportCheckerFlagsViolations) {
  nlohmann::json doc = {{"kind", "eval_report"}, {"config_hash", "0123456789abcdef"}, {"patch_id", "x"},
                        {"reports", nlohmann::json::array()}};
  EXPECT_TRUE(check_report(doc).empty());
  doc["kind"] = "other";
  EXPECT_FALSE(check_report(doc).empty());
  doc["kind"] = "eval_report";
  doc["unexpected"] = 1;
  EXPECT_FALSE(check_report(doc).empty());
}

TEST(Cli, PluginsLoadFromEnvironment) {
  const auto& e = env();
  const std::string cmd = std::string("BADPATCH_PLUGIN_PATH=\"") + BADPATCH_PLUGIN_DIR + "\" \"" + BADPATCH_CLI +
                          "\" -q evaluate --gray 16 -s backends.detector.name=plugin-constant --run-dir \"" +
                          (e.root / "plugin-eval").string() + "\" --dataset \"toy-test=" + e.test.string() +
                          "\" > \"" + (e.root / "pl.log").string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0) << read_file(e.root / "pl.log");
  EXPECT_EQ(run_cli("evaluate --gray 16 -s backends.detector.name=plugin-constant --run-dir \"" +
                        (e.root / "plugin-missing").string() + "\"",
                    e.root / "pm.log"),
            2);
}

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "badpatch/config.hpp"
#include "badpatch/evalkit.hpp"

namespace badpatch {

/// Options shared by every command.
struct CommonOptions {
  std::filesystem::path config;
  std::vector<std::string> overrides;
  // Empty means output_dir/<timestamp>-<hash>.
  std::filesystem::path run_dir;
};

/// A run directory with its trajectory/, checkpoints/, patch/, reports/ and
/// plots/ subdirectories, plus the resolved config.
struct Run {
  RunConfig config;
  std::filesystem::path root;

  std::filesystem::path trajectory() const { return root / "trajectory"; }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path patch() const { return root / "patch"; }
  std::filesystem::path reports() const { return root / "reports"; }
  std::filesystem::path plots() const { return root / "plots"; }
};

/// Loads and validates the config, then creates the run layout and writes
/// config.json. Validation happens before anything touches the disk.
Run open_run(const CommonOptions& options, const std::string& command);

/// Registers plugins found on BADPATCH_PLUGIN_PATH; returns how many loaded.
int load_env_plugins();

struct InvertOutcome {
  std::filesystem::path run_dir;
  std::filesystem::path trajectory;
  double reconstruction_error = 0.0;
};

/// Inverts the reference image and writes trajectory/trajectory.bpa,
/// trajectory/reconstruction.png and reports/reconstruction.json.
InvertOutcome cmd_invert(const CommonOptions& options, const std::filesystem::path& image,
                         const std::filesystem::path& mask, const std::string& prompt);

struct OptimizeOutcome {
  std::filesystem::path run_dir;
  std::filesystem::path patch;
  std::vector<double> round_final_loss;
};

/// Runs the configured number of rounds starting from a trajectory artifact.
/// With `resume`, continues from a checkpoint written by an earlier run with
/// the same config; the trajectory is then taken from that run.
OptimizeOutcome cmd_optimize(const CommonOptions& options,
                             const std::filesystem::path& trajectory,
                             const std::filesystem::path& dataset,
                             const std::filesystem::path& resume = {});

struct EvaluateOutcome {
  std::filesystem::path run_dir;
  std::filesystem::path report;
  std::vector<EvalReport> reports;
  bool any_failed = false;
};

/// Patch source for evaluation: a patch file, a gray control square of the
/// given side, or nothing (clean baseline).
struct PatchChoice {
  std::filesystem::path file;
  int gray_size = 0;
};

/// Evaluates against the config datasets plus `extra` (id=manifest pairs).
EvaluateOutcome cmd_evaluate(const CommonOptions& options, const PatchChoice& patch,
                             const std::vector<std::string>& extra);

/// Collects eval reports from report files or run directories into one table.
std::string cmd_report(const std::vector<std::filesystem::path>& inputs);

/// Writes a toy dataset (PNG scenes + manifest.jsonl) and a reference patch
/// and mask. Returns the manifest path.
std::filesystem::path cmd_toy_data(const std::filesystem::path& out, int count,
                                   std::uint64_t seed);

/// Re-validates a stored artifact on its own and returns a short summary.
nlohmann::json validate_artifact(const std::filesystem::path& path);

/// JSON schema that evaluation reports follow.
const nlohmann::json& report_schema();
/// Checks a document against report_schema(); returns the violations.
std::vector<std::string> check_report(const nlohmann::json& doc);

}  // namespace badpatch

// badpatch command-line interface.
//
// Exit codes: 0 success, 2 validation error, 1 runtime failure.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "badpatch/commands.hpp"
#include "badpatch/error.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kRuntimeError = 1;
constexpr int kValidationError = 2;

void add_common(CLI::App* cmd, badpatch::CommonOptions& common) {
  cmd->add_option("-c,--config", common.config, "Run config (JSON); defaults apply when omitted");
  cmd->add_option("-s,--set", common.overrides, "Override a config key: section.key=value")
      ->take_all();
  cmd->add_option("--run-dir", common.run_dir, "Output directory (default runs/<timestamp>-<hash>)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Naturalistic adversarial patches via diffusion latent optimization"};
  app.require_subcommand(1);
  app.fallthrough();
  bool verbose = false;
  bool quiet = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");
  app.add_flag("-q,--quiet", quiet, "Warnings and errors only");

  badpatch::CommonOptions common;

  auto* invert = app.add_subcommand("invert", "Invert a reference patch into a latent trajectory");
  add_common(invert, common);
  std::string image, mask, prompt;
  invert->add_option("--image", image, "Reference patch image")->required();
  invert->add_option("--mask", mask, "Patch shape mask (white = patch)")->required();
  invert->add_option("--prompt", prompt, "Text description of the reference")->required();

  auto* optimize = app.add_subcommand("optimize", "Optimize a patch against the detector");
  add_common(optimize, common);
  std::string trajectory, dataset, resume;
  optimize->add_option("--trajectory", trajectory, "Trajectory archive from `invert`");
  optimize->add_option("--dataset", dataset, "Training manifest (JSONL); overrides data.train");
  optimize->add_option("--resume", resume, "Checkpoint to continue from");

  auto* evaluate = app.add_subcommand("evaluate", "Measure ASR and AP on annotated datasets");
  add_common(evaluate, common);
  std::string patch;
  int gray = 0;
  std::vector<std::string> datasets;
  auto* patch_opt = evaluate->add_option("--patch", patch, "Patch RGBA PNG");
  evaluate->add_option("--gray", gray, "Use a gray square control patch of this side")
      ->excludes(patch_opt);
  evaluate->add_option("--dataset", datasets, "Extra dataset as id=manifest")->take_all();

  auto* report = app.add_subcommand("report", "Tabulate evaluation reports");
  std::vector<std::string> inputs;
  report->add_option("inputs", inputs, "eval.json files or run directories")->required();

  auto* toy = app.add_subcommand("toy-data", "Write a toy dataset, reference patch and mask");
  std::string toy_out;
  int toy_count = 32;
  std::uint64_t toy_seed = 1;
  toy->add_option("--out", toy_out, "Output directory")->required();
  toy->add_option("--count", toy_count, "Number of scenes");
  toy->add_option("--seed", toy_seed, "Scene seed");

  auto* check = app.add_subcommand("validate", "Re-validate a stored artifact");
  std::string artifact;
  check->add_option("artifact", artifact, "Archive, report, config or patch file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kValidationError;
  }

  spdlog::set_level(verbose ? spdlog::level::debug : quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    badpatch::load_env_plugins();
    if (*invert) {
      const auto out = badpatch::cmd_invert(common, image, mask, prompt);
      std::cout << out.trajectory.string() << '\n';
    } else if (*optimize) {
      const auto out = badpatch::cmd_optimize(common, trajectory, dataset, resume);
      std::cout << out.patch.string() << '\n';
    } else if (*evaluate) {
      const auto out = badpatch::cmd_evaluate(common, {patch, gray}, datasets);
      std::cout << badpatch::cmd_report({out.report});
      if (out.any_failed) return kRuntimeError;
    } else if (*report) {
      std::cout << badpatch::cmd_report({inputs.begin(), inputs.end()});
    } else if (*toy) {
      std::cout << badpatch::cmd_toy_data(toy_out, toy_count, toy_seed).string() << '\n';
    } else if (*check) {
      std::cout << badpatch::validate_artifact(artifact).dump(2) << '\n';
    }
  } catch (const badpatch::ConfigError& e) {
    spdlog::error("{}", e.what());
    return kValidationError;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kRuntimeError;
  }
  return kOk;
}

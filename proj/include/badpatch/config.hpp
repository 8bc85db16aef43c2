#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "badpatch/evalkit.hpp"
#include "badpatch/ido.hpp"
#include "badpatch/inversion.hpp"
#include "badpatch/schedule.hpp"

namespace badpatch {

struct BackendChoice {
  std::string name;
  nlohmann::json params = nlohmann::json::object();
};

struct ScheduleConfig {
  int train_steps = 1000;
  double beta_min = 0.00085;
  double beta_max = 0.012;
  int ddim_steps = 50;
  DdimFormula formula = DdimFormula::standard;

  NoiseSchedule build() const;
};

/// Everything one run needs. Defaults reproduce the reference hyperparameters:
/// T = 50, depth T/2, N_u = 10, eta_u = 0.01, w = 7.5, eta_p = 0.003,
/// epsilon = 0.5, N_iter = 200, batch 32, tau = 0.2, two rounds.
struct RunConfig {
  BackendChoice diffusion{"toy-linear"};
  BackendChoice detector{"toy-detector"};
  BackendChoice similarity{"toy-histogram"};

  ScheduleConfig schedule;
  // Unset means ddim_steps / 2.
  std::optional<int> depth;
  NullTextConfig null_text;

  IdoConfig ido;
  int rounds = 2;
  Rgb background{0.5, 0.5, 0.5};

  EvalConfig eval;
  std::vector<DatasetSource> datasets;
  std::filesystem::path train_manifest;

  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs";

  int effective_depth() const { return depth.value_or(schedule.ddim_steps / 2); }
  InversionSettings inversion() const;

  /// Range checks; with check_files, every referenced file must exist.
  void validate(bool check_files = true) const;

  /// Relative paths are resolved against base_dir. Unknown keys are rejected.
  static RunConfig from_json(const nlohmann::json& j,
                             const std::filesystem::path& base_dir = {});
  nlohmann::json to_json() const;

  /// FNV-1a over the canonical JSON, excluding output_dir.
  std::uint64_t hash() const;
  std::string hash_hex() const;
};

/// Applies "dotted.key=value" to a config document. The value is parsed as
/// JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, std::string_view assignment);

/// Reads a config file (or the defaults when path is empty), applies the
/// overrides and parses the result.
RunConfig load_run_config(const std::filesystem::path& path,
                          const std::vector<std::string>& overrides = {});

}  // namespace badpatch

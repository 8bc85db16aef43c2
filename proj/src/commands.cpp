#include "badpatch/commands.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "badpatch/archive.hpp"
#include "badpatch/backends.hpp"
#include "badpatch/error.hpp"
#include "badpatch/image_io.hpp"
#include "badpatch/toy_data.hpp"

namespace badpatch {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void require_file(const fs::path& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " is required");
  if (!fs::is_regular_file(path)) throw ConfigError(what + " not found: " + path.string());
}

void write_json(const fs::path& path, const json& doc) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << doc.dump(2) << '\n';
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError(path.string() + " is not valid JSON");
  return doc;
}

std::unique_ptr<DiffusionBackend> make_diffusion(const RunConfig& c) {
  return diffusion_registry().create(c.diffusion.name, c.diffusion.params);
}

std::unique_ptr<DetectorBackend> make_detector(const RunConfig& c) {
  return detector_registry().create(c.detector.name, c.detector.params);
}

RunConfig resolve_config(const CommonOptions& options) {
  RunConfig config = load_run_config(options.config, options.overrides);
  config.validate(true);
  return config;
}

Run make_run(RunConfig config, const CommonOptions& options, const std::string& command) {
  Run run;
  if (!options.run_dir.empty()) {
    run.root = options.run_dir;
  } else {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    run.root = config.output_dir /
               fmt::format("{:%Y%m%d-%H%M%S}-{}", fmt::gmtime(now), config.hash_hex().substr(0, 12));
  }
  run.config = std::move(config);
  for (const auto& dir : {run.trajectory(), run.checkpoints(), run.patch(), run.reports(), run.plots()}) {
    fs::create_directories(dir);
  }
  write_json(run.root / "config.json", {{"kind", "run_config"},
                                        {"command", command},
                                        {"config_hash", run.config.hash_hex()},
                                        {"config", run.config.to_json()}});
  spdlog::info("{}: run directory {}", command, run.root.string());
  return run;
}

// Reference image, mask, prompt and background travel with the trajectory.
void describe_trajectory(InversionTrajectory& traj, const PatchSpec& spec, const RunConfig& c,
                         const std::string& artifact_id) {
  traj.context = {{"artifact", artifact_id},
                  {"config_hash", c.hash_hex()},
                  {"diffusion", c.diffusion.name},
                  {"prompt", spec.prompt},
                  {"background", spec.background},
                  {"mask_control", c.ido.mask_control}};
  traj.attachments["reference"] = spec.reference_image;
  traj.attachments["mask"] = mask_to_tensor(spec.mask);
}

PatchSpec spec_from_trajectory(const InversionTrajectory& traj, const RunConfig& c) {
  if (!traj.attachments.count("reference") || !traj.attachments.count("mask")) {
    throw ConfigError("trajectory carries no reference image or mask; run `invert` to produce it");
  }
  PatchSpec spec;
  spec.reference_image = traj.attachments.at("reference");
  spec.mask = tensor_to_mask(traj.attachments.at("mask"));
  try {
    spec.prompt = traj.context.at("prompt").get<std::string>();
    spec.background = traj.context.at("background").get<Rgb>();
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("trajectory context is incomplete: ") + ex.what());
  }
  spec.tau = c.ido.tau;
  spec.validate();
  return spec;
}

TrainingSet training_set_from(const Dataset& data, int target_class) {
  TrainingSet set;
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    std::vector<Box> boxes;
    const auto& rec = data.records[i];
    for (std::size_t k = 0; k < rec.boxes.size(); ++k) {
      if (rec.patched[k] && rec.boxes[k].cls == target_class) boxes.push_back(rec.boxes[k].box);
    }
    set.images.push_back(data.images[i]);
    set.person_boxes.push_back(std::move(boxes));
  }
  set.validate();
  return set;
}

std::string round_name(int round) { return fmt::format("round-{:02d}", round); }

}  // namespace

Run open_run(const CommonOptions& options, const std::string& command) {
  return make_run(resolve_config(options), options, command);
}

int load_env_plugins() {
  const char* path = std::getenv("BADPATCH_PLUGIN_PATH");
  if (path == nullptr || *path == '\0') return 0;
  const int n = load_plugins(path);
  spdlog::info("loaded {} plugin(s) from BADPATCH_PLUGIN_PATH", n);
  return n;
}

InvertOutcome cmd_invert(const CommonOptions& options, const fs::path& image, const fs::path& mask,
                         const std::string& prompt) {
  require_file(image, "reference image");
  require_file(mask, "mask");
  RunConfig config = resolve_config(options);

  PatchSpec spec;
  spec.reference_image = load_image(image);
  spec.mask = load_mask(mask);
  spec.prompt = prompt;
  spec.background = config.background;
  spec.tau = config.ido.tau;
  spec.validate();

  const auto diffusion = make_diffusion(config);
  const Shape latent = diffusion->latent_shape();
  const int f = diffusion->pixel_factor();
  const Shape& img = spec.reference_image.shape();
  if (img.height != latent.height * f || img.width != latent.width * f) {
    throw ConfigError(fmt::format("reference image must be {}x{} for backend '{}'",
                                  latent.width * f, latent.height * f, diffusion->name()));
  }

  Run run = make_run(std::move(config), options, "invert");
  const RunConfig& c = run.config;
  const NoiseSchedule schedule = c.schedule.build();
  InversionTrajectory traj = invert_spec(spec, schedule, *diffusion, c.inversion(), c.ido.mask_control);
  describe_trajectory(traj, spec, c, "trajectory");

  InvertOutcome out;
  out.run_dir = run.root;
  out.trajectory = run.trajectory() / "trajectory.bpa";
  out.reconstruction_error = traj.reconstruction_error;
  save_trajectory(out.trajectory, traj);

  const Tensor z0 = regenerate(traj, traj.start(), schedule, *diffusion);
  save_image(run.trajectory() / "reconstruction.png", diffusion->decode_latent(z0));

  json steps = json::array();
  std::vector<double> final_objective;
  for (const auto& h : traj.objective_history) {
    steps.push_back({{"initial", h.empty() ? 0.0 : h.front()},
                     {"final", h.empty() ? 0.0 : h.back()},
                     {"accepted_updates", h.empty() ? 0 : static_cast<int>(h.size()) - 1}});
    final_objective.push_back(h.empty() ? 0.0 : h.back());
  }
  write_json(run.reports() / "reconstruction.json",
             {{"kind", "reconstruction_report"},
              {"config_hash", c.hash_hex()},
              {"depth", traj.half_t},
              {"guidance", traj.w},
              {"reconstruction_error", traj.reconstruction_error},
              {"steps", steps}});
  if (!final_objective.empty()) {
    plot_series(run.plots() / "null_text_objective.png", "null-text objective per step",
                {{"final objective", final_objective}});
  }
  spdlog::info("invert: reconstruction error {:.3e}", traj.reconstruction_error);
  return out;
}

OptimizeOutcome cmd_optimize(const CommonOptions& options, const fs::path& trajectory,
                             const fs::path& dataset, const fs::path& resume) {
  RunConfig config = resolve_config(options);

  int first_round = 1;
  std::optional<OptimizationState> state;
  fs::path traj_path = trajectory;
  if (!resume.empty()) {
    require_file(resume, "checkpoint");
    json ctx;
    state = load_checkpoint(resume, &ctx);
    if (ctx.value("config_hash", "") != config.hash_hex()) {
      throw ConfigError("checkpoint was written under a different config (hash " +
                        ctx.value("config_hash", std::string("?")) + ", now " + config.hash_hex() + ")");
    }
    first_round = ctx.value("round", 1);
    if (first_round < 1 || first_round > config.rounds) {
      throw ConfigError(fmt::format("checkpoint round {} is outside 1..{}", first_round, config.rounds));
    }
    // <run>/checkpoints/round-XX/<file>
    const fs::path source_run = resume.parent_path().parent_path().parent_path();
    traj_path = source_run / "trajectory" / (round_name(first_round) + ".bpa");
  }
  require_file(traj_path, "trajectory");
  const fs::path manifest = dataset.empty() ? config.train_manifest : dataset;
  require_file(manifest, "training manifest");

  const InversionTrajectory traj = load_trajectory(traj_path);
  const PatchSpec spec = spec_from_trajectory(traj, config);
  const Dataset train_data = load_dataset({"train", manifest});
  const TrainingSet train = training_set_from(train_data, config.eval.target_class);
  if (train.size() == 0) throw ConfigError("training manifest lists no images");

  const auto diffusion = make_diffusion(config);
  const auto detector = make_detector(config);

  Run run = make_run(std::move(config), options, "optimize");
  const RunConfig& c = run.config;
  const NoiseSchedule schedule = c.schedule.build();

  IdoConfig ido = c.ido;
  ido.checkpoint_dir = run.checkpoints();
  ido.checkpoint_context = {{"config_hash", c.hash_hex()}};

  std::ofstream csv(run.reports() / "loss.csv");
  csv << "round,iteration,loss,score\n";
  std::vector<PlotSeries> loss_plot, score_plot;
  json rounds_json = json::array();

  RoundOptions ro;
  ro.first_round = first_round;
  ro.trajectory = &traj;
  ro.resume = std::move(state);
  ro.on_inverted = [&](const std::string& id, const PatchSpec& round_spec, const InversionTrajectory& t) {
    InversionTrajectory copy = t;
    describe_trajectory(copy, round_spec, c, id);
    save_trajectory(run.trajectory() / (id + ".bpa"), copy);
  };
  ro.on_iteration = [&](const OptimizationState& s, const Image&) {
    if (s.iteration % 10 == 0 || s.iteration == ido.iterations) {
      spdlog::info("optimize: iteration {}/{} loss {:.5f} score {:.4f}", s.iteration, ido.iterations,
                   s.loss_history.back(), s.score_history.back());
    }
  };
  ro.on_round = [&](const RoundResult& r) {
    const auto& st = r.result.state;
    for (std::size_t i = 0; i < st.loss_history.size(); ++i) {
      csv << fmt::format("{},{},{:.17g},{:.17g}\n", r.artifact_id, i + 1, st.loss_history[i],
                         st.score_history[i]);
    }
    csv.flush();
    save_rgba_patch(run.patch() / (r.artifact_id + ".png"), r.result.patch, r.result.mask);
    loss_plot.push_back({r.artifact_id, st.loss_history});
    score_plot.push_back({r.artifact_id, st.score_history});
    rounds_json.push_back({{"id", r.artifact_id},
                           {"iterations", st.iteration},
                           {"final_loss", r.result.final_loss},
                           {"reconstruction_error", r.trajectory.reconstruction_error}});
    spdlog::info("optimize: {} final loss {:.5f}", r.artifact_id, r.result.final_loss);
  };

  const auto results = iterative_optimize(spec, c.rounds, {schedule, *diffusion, *detector, train},
                                          c.inversion(), ido, ro);

  OptimizeOutcome out;
  out.run_dir = run.root;
  out.patch = run.patch() / "patch.png";
  for (const auto& r : results) out.round_final_loss.push_back(r.result.final_loss);
  const IdoResult& last = results.back().result;
  save_rgba_patch(out.patch, last.patch, last.mask);
  const std::string patch_id = "patch-" + c.hash_hex().substr(0, 12);
  write_json(run.patch() / "patch.json", {{"kind", "patch"},
                                          {"id", patch_id},
                                          {"config_hash", c.hash_hex()},
                                          {"rounds", rounds_json}});
  write_json(run.reports() / "optimize.json", {{"kind", "optimize_report"},
                                               {"config_hash", c.hash_hex()},
                                               {"patch_id", patch_id},
                                               {"first_round", first_round},
                                               {"rounds", rounds_json}});
  if (!loss_plot.empty() && !loss_plot.front().values.empty()) {
    plot_series(run.plots() / "loss.png", std::string(to_string(c.ido.loss.kind)) + " loss", loss_plot);
    plot_series(run.plots() / "score.png", "mean max person score", score_plot);
  }
  return out;
}

EvaluateOutcome cmd_evaluate(const CommonOptions& options, const PatchChoice& patch,
                             const std::vector<std::string>& extra) {
  RunConfig config = resolve_config(options);
  if (!patch.file.empty() && patch.gray_size > 0) {
    throw ConfigError("choose either a patch file or a gray control, not both");
  }
  std::vector<DatasetSource> sources = config.datasets;
  for (const auto& e : extra) {
    const auto eq = e.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("dataset '" + e + "' is not id=manifest");
    DatasetSource s{e.substr(0, eq), e.substr(eq + 1)};
    require_file(s.manifest, "dataset manifest");
    for (const auto& o : sources) {
      if (o.id == s.id) throw ConfigError("duplicate dataset id '" + s.id + "'");
    }
    sources.push_back(std::move(s));
  }
  if (sources.empty()) throw ConfigError("no datasets to evaluate");

  std::optional<PatchArtifact> artifact;
  if (!patch.file.empty()) {
    require_file(patch.file, "patch");
    auto [image, mask] = load_rgba_patch(patch.file);
    PatchArtifact a{patch.file.stem().string(), std::move(image), std::move(mask)};
    const fs::path sidecar = fs::path(patch.file).replace_extension(".json");
    if (fs::is_regular_file(sidecar)) a.id = read_json(sidecar).value("id", a.id);
    artifact = std::move(a);
  } else if (patch.gray_size > 0) {
    artifact = PatchArtifact{fmt::format("gray-{}", patch.gray_size), make_gray_patch(patch.gray_size),
                             Mask(patch.gray_size, patch.gray_size, true)};
  }

  const auto detector = make_detector(config);
  Run run = make_run(std::move(config), options, "evaluate");

  EvaluateOutcome out;
  out.run_dir = run.root;
  out.report = run.reports() / "eval.json";
  out.reports = cross_dataset_eval(artifact, std::span<const DatasetSource>(sources), *detector,
                                   run.config.eval);
  json list = json::array();
  for (const auto& r : out.reports) {
    list.push_back(r.to_json());
    if (!r.ok()) {
      out.any_failed = true;
      spdlog::error("evaluate: dataset {} failed: {}", r.dataset_id, r.error);
    }
  }
  const json doc = {{"kind", "eval_report"},
                    {"config_hash", run.config.hash_hex()},
                    {"patch_id", artifact ? artifact->id : "none"},
                    {"reports", list}};
  if (const auto problems = check_report(doc); !problems.empty()) {
    throw std::logic_error("evaluation report violates its schema: " + problems.front());
  }
  write_json(out.report, doc);
  std::ofstream(run.reports() / "eval.md") << format_report_table(out.reports);
  return out;
}

std::string cmd_report(const std::vector<fs::path>& inputs) {
  if (inputs.empty()) throw ConfigError("report: no inputs");
  std::vector<EvalReport> all;
  for (const auto& in : inputs) {
    const fs::path file = fs::is_directory(in) ? in / "reports" / "eval.json" : in;
    require_file(file, "report");
    const json doc = read_json(file);
    if (const auto problems = check_report(doc); !problems.empty()) {
      throw ConfigError(file.string() + ": " + problems.front());
    }
    for (const auto& r : doc.at("reports")) all.push_back(EvalReport::from_json(r));
  }
  return format_report_table(all);
}

fs::path cmd_toy_data(const fs::path& out, int count, std::uint64_t seed) {
  if (count < 1) throw ConfigError("toy-data: count must be >= 1");
  fs::create_directories(out / "images");
  const TrainingSet set = make_toy_training_set(count, seed);
  std::vector<AnnotationRecord> records;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const std::string name = fmt::format("images/scene-{:04d}.png", i);
    save_image(out / name, set.images[i]);
    AnnotationRecord rec;
    rec.image_path = name;
    for (const Box& b : set.person_boxes[i]) {
      rec.boxes.push_back({0, b});
      rec.patched.push_back(true);
    }
    records.push_back(std::move(rec));
  }
  const fs::path manifest = out / "manifest.jsonl";
  write_manifest(manifest, records);
  save_image(out / "reference.png", make_reference_patch());
  save_mask(out / "mask.png", make_disk_mask());
  return manifest;
}

nlohmann::json validate_artifact(const fs::path& path) {
  require_file(path, "artifact");
  const std::string ext = path.extension().string();
  if (ext == ".json") {
    const json doc = read_json(path);
    const std::string kind = doc.value("kind", "");
    if (kind == "eval_report") {
      if (const auto problems = check_report(doc); !problems.empty()) throw ConfigError(problems.front());
      return {{"kind", kind}, {"reports", doc.at("reports").size()}};
    }
    if (kind == "run_config") {
      RunConfig c = RunConfig::from_json(doc.at("config"));
      c.validate(false);
      if (c.hash_hex() != doc.value("config_hash", "")) throw ConfigError("config hash does not match");
      return {{"kind", kind}, {"config_hash", c.hash_hex()}};
    }
    if (kind.empty()) throw ConfigError(path.string() + ": no artifact kind");
    return {{"kind", kind}};
  }
  if (ext == ".png") {
    const auto [image, mask] = load_rgba_patch(path);
    return {{"kind", "patch_image"},
            {"width", image.shape().width},
            {"height", image.shape().height},
            {"mask_cells", mask.count()}};
  }
  const Archive a = read_archive(path);
  if (a.kind == "trajectory") {
    const InversionTrajectory t = load_trajectory(path);
    t.validate();
    return {{"kind", a.kind},
            {"depth", t.half_t},
            {"reconstruction_error", t.reconstruction_error},
            {"context", t.context}};
  }
  if (a.kind == "checkpoint") {
    json ctx;
    const OptimizationState s = load_checkpoint(path, &ctx);
    return {{"kind", a.kind}, {"iteration", s.iteration}, {"context", ctx}};
  }
  return {{"kind", a.kind}};
}

const nlohmann::json& report_schema() {
  static const json schema = json::parse(R"({
  "$schema": "https://json-schema.org/draft/2020-12/schema",
  "title": "badpatch evaluation report",
  "type": "object",
  "required": ["kind", "config_hash", "patch_id", "reports"],
  "additionalProperties": false,
  "properties": {
    "kind": {"const": "eval_report"},
    "config_hash": {"type": "string"},
    "patch_id": {"type": "string"},
    "reports": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["dataset_id", "patch_id", "asr", "ap", "thresholds", "per_image"],
        "additionalProperties": false,
        "properties": {
          "dataset_id": {"type": "string"},
          "patch_id": {"type": "string"},
          "asr": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
          "ap": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
          "thresholds": {
            "type": "object",
            "required": ["confidence", "iou"],
            "additionalProperties": false,
            "properties": {
              "confidence": {"type": "number", "minimum": 0, "maximum": 1},
              "iou": {"type": "number", "minimum": 0, "maximum": 1}
            }
          },
          "per_image": {
            "type": "array",
            "items": {
              "type": "object",
              "required": ["image", "gt_count", "matched_count", "patched_count", "evaded_count"],
              "additionalProperties": false,
              "properties": {
                "image": {"type": "string"},
                "gt_count": {"type": "integer", "minimum": 0},
                "matched_count": {"type": "integer", "minimum": 0},
                "patched_count": {"type": "integer", "minimum": 0},
                "evaded_count": {"type": "integer", "minimum": 0}
              }
            }
          },
          "error": {"type": "string"}
        }
      }
    }
  }
})");
  return schema;
}

namespace {

bool type_matches(const json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "integer") return v.is_number_integer();
  if (type == "number") return v.is_number();
  if (type == "boolean") return v.is_boolean();
  if (type == "null") return v.is_null();
  return false;
}

// Interprets the keywords report_schema() uses.
void check_node(const json& v, const json& schema, const std::string& at, std::vector<std::string>& out) {
  if (schema.contains("const") && v != schema.at("const")) {
    out.push_back(at + ": expected " + schema.at("const").dump());
  }
  if (schema.contains("type")) {
    const json& t = schema.at("type");
    bool ok = false;
    if (t.is_string()) {
      ok = type_matches(v, t.get<std::string>());
    } else {
      for (const auto& alt : t) ok = ok || type_matches(v, alt.get<std::string>());
    }
    if (!ok) {
      out.push_back(at + ": expected type " + t.dump());
      return;
    }
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (schema.contains("minimum") && x < schema.at("minimum").get<double>()) out.push_back(at + ": below minimum");
    if (schema.contains("maximum") && x > schema.at("maximum").get<double>()) out.push_back(at + ": above maximum");
  }
  if (v.is_object()) {
    for (const auto& key : schema.value("required", json::array())) {
      if (!v.contains(key.get<std::string>())) out.push_back(at + ": missing '" + key.get<std::string>() + "'");
    }
    const json props = schema.value("properties", json::object());
    for (const auto& [key, child] : v.items()) {
      if (props.contains(key)) {
        check_node(child, props.at(key), at + "." + key, out);
      } else if (!schema.value("additionalProperties", true)) {
        out.push_back(at + ": unexpected '" + key + "'");
      }
    }
  }
  if (v.is_array() && schema.contains("items")) {
    for (std::size_t i = 0; i < v.size(); ++i) {
      check_node(v[i], schema.at("items"), fmt::format("{}[{}]", at, i), out);
    }
  }
}

}  // namespace

std::vector<std::string> check_report(const nlohmann::json& doc) {
  std::vector<std::string> out;
  check_node(doc, report_schema(), "$", out);
  return out;
}

}  // namespace badpatch

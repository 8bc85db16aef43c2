#include "badpatch/config.hpp"

#include <fstream>
#include <set>

#include "badpatch/error.hpp"
#include "badpatch/hash.hpp"

namespace badpatch {

namespace {

using nlohmann::json;

// Reads keys out of one JSON object and rejects any it did not consume.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: '" + path(key) + "' has the wrong type");
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }

  void done() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("config: unknown key '" + path(key) + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

BackendChoice read_backend(const json& j, const std::string& name, BackendChoice fallback) {
  Section s(j, name);
  s.read("name", fallback.name);
  if (const json* p = s.child("params")) {
    if (!p->is_object()) throw ConfigError("config: '" + name + ".params' must be an object");
    fallback.params = *p;
  }
  s.done();
  return fallback;
}

std::filesystem::path resolve(const std::string& value, const std::filesystem::path& base) {
  std::filesystem::path p(value);
  return p.is_relative() && !base.empty() ? base / p : p;
}

}  // namespace

NoiseSchedule ScheduleConfig::build() const {
  return build_schedule(train_steps, beta_min, beta_max, ddim_steps);
}

InversionSettings RunConfig::inversion() const {
  InversionSettings s;
  s.depth = effective_depth();
  s.null_text = null_text;
  s.null_text.formula = schedule.formula;
  return s;
}

void RunConfig::validate(bool check_files) const {
  if (diffusion.name.empty() || detector.name.empty()) {
    throw ConfigError("config: backend names must not be empty");
  }
  if (schedule.train_steps < 1) throw ConfigError("config: schedule.train_steps must be >= 1");
  if (schedule.ddim_steps < 1 || schedule.ddim_steps > schedule.train_steps) {
    throw ConfigError("config: schedule.ddim_steps must lie in [1, train_steps]");
  }
  if (!(schedule.beta_min > 0.0 && schedule.beta_min < schedule.beta_max && schedule.beta_max < 1.0)) {
    throw ConfigError("config: need 0 < beta_min < beta_max < 1");
  }
  const int d = effective_depth();
  if (d < 0 || d > schedule.ddim_steps) {
    throw ConfigError("config: inversion.depth must lie in [0, ddim_steps]");
  }
  null_text.validate();
  ido.validate();
  if (rounds < 1) throw ConfigError("config: ido.rounds must be >= 1");
  for (double c : background) {
    if (!(c >= 0.0 && c <= 1.0)) throw ConfigError("config: render.background must lie in [0, 1]");
  }
  eval.validate();
  std::set<std::string> ids;
  for (const auto& ds : datasets) {
    if (ds.id.empty()) throw ConfigError("config: every dataset needs an id");
    if (!ids.insert(ds.id).second) throw ConfigError("config: duplicate dataset id '" + ds.id + "'");
  }
  if (check_files) {
    for (const auto& ds : datasets) {
      if (!std::filesystem::is_regular_file(ds.manifest)) {
        throw ConfigError("config: dataset manifest not found: " + ds.manifest.string());
      }
    }
    if (!train_manifest.empty() && !std::filesystem::is_regular_file(train_manifest)) {
      throw ConfigError("config: training manifest not found: " + train_manifest.string());
    }
  }
}

RunConfig RunConfig::from_json(const json& j, const std::filesystem::path& base_dir) {
  RunConfig c;
  Section root(j, "");
  root.read("seed", c.seed);
  std::string out_dir = c.output_dir.string();
  root.read("output_dir", out_dir);
  c.output_dir = out_dir;

  if (const json* b = root.child("backends")) {
    Section s(*b, "backends");
    if (const json* x = s.child("diffusion")) c.diffusion = read_backend(*x, "backends.diffusion", c.diffusion);
    if (const json* x = s.child("detector")) c.detector = read_backend(*x, "backends.detector", c.detector);
    if (const json* x = s.child("similarity")) c.similarity = read_backend(*x, "backends.similarity", c.similarity);
    s.done();
  }

  if (const json* x = root.child("schedule")) {
    Section s(*x, "schedule");
    s.read("train_steps", c.schedule.train_steps);
    s.read("beta_min", c.schedule.beta_min);
    s.read("beta_max", c.schedule.beta_max);
    s.read("ddim_steps", c.schedule.ddim_steps);
    std::string formula(to_string(c.schedule.formula));
    s.read("formula", formula);
    c.schedule.formula = parse_formula(formula);
    s.done();
  }

  if (const json* x = root.child("inversion")) {
    Section s(*x, "inversion");
    if (const json* d = s.child("depth"); d && !d->is_null()) {
      if (!d->is_number_integer()) throw ConfigError("config: 'inversion.depth' has the wrong type");
      c.depth = d->get<int>();
    }
    s.read("guidance", c.null_text.w);
    s.read("inner_steps", c.null_text.n_inner);
    s.read("lr", c.null_text.lr);
    s.read("early_exit", c.null_text.early_exit);
    s.done();
  }

  if (const json* x = root.child("ido")) {
    Section s(*x, "ido");
    s.read("lr", c.ido.lr);
    s.read("epsilon", c.ido.epsilon);
    s.read("iterations", c.ido.iterations);
    s.read("batch", c.ido.batch);
    std::string loss(to_string(c.ido.loss.kind));
    s.read("loss", loss);
    c.ido.loss.kind = parse_loss_kind(loss);
    s.read("iou_threshold", c.ido.loss.iou_threshold);
    s.read("rounds", c.rounds);
    s.read("mask_control", c.ido.mask_control);
    s.read("checkpoint_every", c.ido.checkpoint_every);
    s.read("parallel", c.ido.parallel);
    s.done();
  }

  if (const json* x = root.child("render")) {
    Section s(*x, "render");
    s.read("tau", c.ido.tau);
    s.read("background", c.background);
    if (const json* a = s.child("augment")) {
      try {
        c.ido.augment = AugmentConfig::from_json(*a);
      } catch (const json::exception& ex) {
        throw ConfigError(std::string("config: render.augment: ") + ex.what());
      }
    }
    s.done();
  }

  if (const json* x = root.child("eval")) {
    Section s(*x, "eval");
    s.read("confidence", c.eval.confidence);
    s.read("iou", c.eval.iou);
    std::string interp(to_string(c.eval.interpolation));
    s.read("interpolation", interp);
    c.eval.interpolation = parse_interpolation(interp);
    s.read("parallel", c.eval.parallel);
    if (const json* ds = s.child("datasets")) {
      if (!ds->is_array()) throw ConfigError("config: 'eval.datasets' must be an array");
      for (const auto& d : *ds) {
        Section e(d, "eval.datasets[]");
        std::string id, manifest;
        e.read("id", id);
        e.read("manifest", manifest);
        e.done();
        if (manifest.empty()) throw ConfigError("config: dataset '" + id + "' needs a manifest");
        c.datasets.push_back({id, resolve(manifest, base_dir)});
      }
    }
    s.done();
  }

  if (const json* x = root.child("data")) {
    Section s(*x, "data");
    std::string train;
    s.read("train", train);
    if (!train.empty()) c.train_manifest = resolve(train, base_dir);
    s.done();
  }

  root.done();

  // Shared settings live in one place in the file.
  c.ido.seed = c.seed;
  c.ido.loss.target_class = c.eval.target_class;
  c.eval.tau = c.ido.tau;
  return c;
}

json RunConfig::to_json() const {
  json datasets_j = json::array();
  for (const auto& d : datasets) datasets_j.push_back({{"id", d.id}, {"manifest", d.manifest.string()}});
  auto backend = [](const BackendChoice& b) { return json{{"name", b.name}, {"params", b.params}}; };
  return {
      {"seed", seed},
      {"output_dir", output_dir.string()},
      {"backends",
       {{"diffusion", backend(diffusion)},
        {"detector", backend(detector)},
        {"similarity", backend(similarity)}}},
      {"schedule",
       {{"train_steps", schedule.train_steps},
        {"beta_min", schedule.beta_min},
        {"beta_max", schedule.beta_max},
        {"ddim_steps", schedule.ddim_steps},
        {"formula", std::string(to_string(schedule.formula))}}},
      {"inversion",
       {{"depth", effective_depth()},
        {"guidance", null_text.w},
        {"inner_steps", null_text.n_inner},
        {"lr", null_text.lr},
        {"early_exit", null_text.early_exit}}},
      {"ido",
       {{"lr", ido.lr},
        {"epsilon", ido.epsilon},
        {"iterations", ido.iterations},
        {"batch", ido.batch},
        {"loss", std::string(to_string(ido.loss.kind))},
        {"iou_threshold", ido.loss.iou_threshold},
        {"rounds", rounds},
        {"mask_control", ido.mask_control},
        {"checkpoint_every", ido.checkpoint_every},
        {"parallel", ido.parallel}}},
      {"render", {{"tau", ido.tau}, {"background", background}, {"augment", ido.augment.to_json()}}},
      {"eval",
       {{"confidence", eval.confidence},
        {"iou", eval.iou},
        {"interpolation", std::string(to_string(eval.interpolation))},
        {"parallel", eval.parallel},
        {"datasets", datasets_j}}},
      {"data", {{"train", train_manifest.string()}}},
  };
}

std::uint64_t RunConfig::hash() const {
  json j = to_json();
  j.erase("output_dir");
  // Thread counts and checkpoint cadence do not change results.
  j["ido"].erase("parallel");
  j["ido"].erase("checkpoint_every");
  j["eval"].erase("parallel");
  return fnv1a64(j.dump());
}

std::string RunConfig::hash_hex() const { return hex64(hash()); }

void apply_override(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string value(assignment.substr(eq + 1));
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = parsed;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json doc = json::object();
  std::filesystem::path base;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
    base = path.parent_path();
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return RunConfig::from_json(doc, base);
}

}  // namespace badpatch

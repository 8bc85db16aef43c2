#include "badpatch/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "badpatch/image_io.hpp"

namespace badpatch {

void AnnotationRecord::validate(int width, int height) const {
  if (patched.size() != boxes.size()) {
    throw ConfigError("annotation " + image_path + ": one patched flag per box required");
  }
  for (const auto& e : boxes) {
    const Box& b = e.box;
    if (!(b.w > 0 && b.h > 0 && b.x >= 0 && b.y >= 0 && b.x + b.w <= width && b.y + b.h <= height)) {
      throw ConfigError("annotation " + image_path + ": box outside the image");
    }
  }
}

nlohmann::json AnnotationRecord::to_json() const {
  nlohmann::json boxes_json = nlohmann::json::array();
  for (const auto& e : boxes) boxes_json.push_back({e.cls, e.box.x, e.box.y, e.box.w, e.box.h});
  nlohmann::json flags = nlohmann::json::array();
  for (bool f : patched) flags.push_back(f);
  return {{"image", image_path}, {"boxes", boxes_json}, {"patched", flags}};
}

AnnotationRecord AnnotationRecord::from_json(const nlohmann::json& j) {
  AnnotationRecord r;
  r.image_path = j.at("image").get<std::string>();
  for (const auto& b : j.at("boxes")) {
    if (!b.is_array() || b.size() != 5) throw ConfigError("annotation: box must be [cls, x, y, w, h]");
    r.boxes.push_back({b[0].get<int>(), Box{b[1].get<double>(), b[2].get<double>(),
                                            b[3].get<double>(), b[4].get<double>()}});
  }
  if (j.contains("patched")) {
    for (const auto& f : j.at("patched")) r.patched.push_back(f.get<bool>());
  } else {
    r.patched.assign(r.boxes.size(), false);
  }
  if (r.patched.size() != r.boxes.size()) {
    throw ConfigError("annotation " + r.image_path + ": one patched flag per box required");
  }
  return r;
}

std::vector<AnnotationRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest " + path.string());
  std::vector<AnnotationRecord> out;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      AnnotationRecord r = AnnotationRecord::from_json(nlohmann::json::parse(line));
      const std::filesystem::path image(r.image_path);
      if (image.is_relative()) r.image_path = (path.parent_path() / image).lexically_normal().string();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& ex) {
      throw ConfigError(path.string() + ":" + std::to_string(number) + ": " + ex.what());
    }
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, std::span<const AnnotationRecord> records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  for (const auto& r : records) out << r.to_json().dump() << '\n';
}

namespace {

// Indices of predictions above `conf` for class `cls`, by descending confidence (stable).
std::vector<std::size_t> ranked(const Detections& preds, double conf, int cls) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].confidence(cls) > conf) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return preds[a].confidence(cls) > preds[b].confidence(cls);
  });
  return order;
}

}  // namespace

Matching match_detections(const Detections& preds, std::span<const Box> gt, double conf,
                          double iou_t, int cls) {
  Matching m;
  m.pred_to_gt.assign(preds.size(), -1);
  m.gt_to_pred.assign(gt.size(), -1);
  for (std::size_t p : ranked(preds, conf, cls)) {
    int best = -1;
    double best_iou = iou_t;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (m.gt_to_pred[g] >= 0) continue;
      const double v = iou(preds[p].box, gt[g]);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      m.pred_to_gt[p] = best;
      m.gt_to_pred[static_cast<std::size_t>(best)] = static_cast<int>(p);
      ++m.matched;
    }
  }
  return m;
}

double compute_asr(std::span<const ImageRecord> records) {
  long patched = 0;
  long evaded = 0;
  for (const auto& r : records) {
    patched += r.patched_count;
    evaded += r.evaded_count;
  }
  if (patched == 0) throw std::domain_error("ASR is undefined without patched persons");
  return static_cast<double>(evaded) / static_cast<double>(patched);
}

ApInterpolation parse_interpolation(std::string_view name) {
  if (name == "all_point") return ApInterpolation::all_point;
  if (name == "eleven_point") return ApInterpolation::eleven_point;
  throw ConfigError("unknown AP interpolation '" + std::string(name) + "'");
}

std::string_view to_string(ApInterpolation interp) {
  return interp == ApInterpolation::all_point ? "all_point" : "eleven_point";
}

PrCurve pr_curve(std::span<const Detections> preds, std::span<const std::vector<Box>> gt,
                 double iou_t, int cls, double conf) {
  if (preds.size() != gt.size()) throw std::invalid_argument("pr_curve: batch size mismatch");
  struct Ranked {
    double score;
    std::size_t image;
    std::size_t pred;
  };
  std::vector<Ranked> all;
  std::size_t total_gt = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    total_gt += gt[i].size();
    for (std::size_t p = 0; p < preds[i].size(); ++p) {
      const double s = preds[i][p].confidence(cls);
      if (s > conf) all.push_back({s, i, p});
    }
  }
  if (total_gt == 0) throw std::domain_error("AP is undefined without ground truth");
  std::stable_sort(all.begin(), all.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> claimed(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) claimed[i].assign(gt[i].size(), false);
  PrCurve curve;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < all.size(); ++k) {
    const auto& r = all[k];
    const auto& boxes = gt[r.image];
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t g = 0; g < boxes.size(); ++g) {
      const double v = iou(preds[r.image][r.pred].box, boxes[g]);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou > iou_t && !claimed[r.image][static_cast<std::size_t>(best)]) {
      claimed[r.image][static_cast<std::size_t>(best)] = true;
      ++tp;
    }
    curve.precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    curve.recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }
  return curve;
}

double average_precision(const PrCurve& curve, ApInterpolation interp) {
  const std::size_t n = curve.precision.size();
  if (interp == ApInterpolation::eleven_point) {
    double sum = 0.0;
    for (int i = 0; i <= 10; ++i) {
      const double level = i / 10.0;
      double best = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        if (curve.recall[k] >= level) best = std::max(best, curve.precision[k]);
      }
      sum += best;
    }
    return sum / 11.0;
  }
  // Precision envelope, then the sum of recall steps times the envelope.
  std::vector<double> envelope(curve.precision);
  for (std::size_t k = n; k-- > 1;) envelope[k - 1] = std::max(envelope[k - 1], envelope[k]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    ap += (curve.recall[k] - prev_recall) * envelope[k];
    prev_recall = curve.recall[k];
  }
  return ap;
}

double compute_ap(std::span<const Detections> preds, std::span<const std::vector<Box>> gt,
                  double iou_t, int cls, ApInterpolation interp, double conf) {
  return average_precision(pr_curve(preds, gt, iou_t, cls, conf), interp);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

double image_similarity(const Image& a, const Image& b, const SimilarityBackend& scorer,
                        const Mask* mask) {
  return cosine_similarity(scorer.embed_image(a, mask), scorer.embed_image(b, mask));
}

double naturalness_score(const Image& patch, const Mask* mask, std::string_view description,
                         const SimilarityBackend* scorer) {
  if (scorer == nullptr) throw ConfigError("naturalness_score: no similarity scorer configured");
  return cosine_similarity(scorer->embed_image(patch, mask), scorer->embed_text(description));
}

void EvalConfig::validate() const {
  if (!(confidence > 0.0 && confidence < 1.0)) throw ConfigError("eval: confidence must lie in (0, 1)");
  if (!(iou > 0.0 && iou < 1.0)) throw ConfigError("eval: iou must lie in (0, 1)");
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("eval: tau must lie in (0, 1)");
  if (target_class < 0) throw ConfigError("eval: target_class must be >= 0");
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& r : per_image) {
    images.push_back({{"image", r.image},
                      {"gt_count", r.gt_count},
                      {"matched_count", r.matched_count},
                      {"patched_count", r.patched_count},
                      {"evaded_count", r.evaded_count}});
  }
  nlohmann::json j = {{"dataset_id", dataset_id},
                      {"patch_id", patch_id},
                      {"asr", asr ? nlohmann::json(*asr) : nlohmann::json(nullptr)},
                      {"ap", ap ? nlohmann::json(*ap) : nlohmann::json(nullptr)},
                      {"thresholds", {{"confidence", confidence}, {"iou", iou}}},
                      {"per_image", images}};
  if (!error.empty()) j["error"] = error;
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.dataset_id = j.at("dataset_id").get<std::string>();
  r.patch_id = j.at("patch_id").get<std::string>();
  if (!j.at("asr").is_null()) r.asr = j.at("asr").get<double>();
  if (!j.at("ap").is_null()) r.ap = j.at("ap").get<double>();
  r.confidence = j.at("thresholds").at("confidence").get<double>();
  r.iou = j.at("thresholds").at("iou").get<double>();
  for (const auto& im : j.at("per_image")) {
    r.per_image.push_back({im.at("image").get<std::string>(), im.at("gt_count").get<int>(),
                           im.at("matched_count").get<int>(), im.at("patched_count").get<int>(),
                           im.at("evaded_count").get<int>()});
  }
  r.error = j.value("error", "");
  return r;
}

EvalReport evaluate_dataset(const Dataset& data, const std::optional<PatchArtifact>& patch,
                            const DetectorBackend& detector, const EvalConfig& config) {
  config.validate();
  if (data.images.size() != data.records.size()) {
    throw ConfigError("dataset " + data.id + ": one image per annotation record required");
  }
  EvalReport report;
  report.dataset_id = data.id;
  report.patch_id = patch ? patch->id : "none";
  report.confidence = config.confidence;
  report.iou = config.iou;

  const std::size_t n = data.records.size();
  std::vector<Detections> preds(n);
  std::vector<std::vector<Box>> persons(n);
  std::vector<std::vector<bool>> flags(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& rec = data.records[i];
    rec.validate(data.images[i].shape().width, data.images[i].shape().height);
    for (std::size_t k = 0; k < rec.boxes.size(); ++k) {
      if (rec.boxes[k].cls != config.target_class) continue;
      persons[i].push_back(rec.boxes[k].box);
      flags[i].push_back(rec.patched[k]);
    }
  }

  const bool parallel = config.parallel && detector.concurrency() == Concurrency::concurrent_read;
  parallel_for(
      n,
      [&](std::size_t i) {
        Image scene = data.images[i];
        if (patch) {
          for (std::size_t k = 0; k < persons[i].size(); ++k) {
            if (!flags[i][k]) continue;
            scene = apply_patch(scene, persons[i][k], patch->image, patch->mask, config.tau,
                                PatchTransform{});
          }
        }
        preds[i] = std::move(detector.detect(std::span<const Image>(&scene, 1)).front());
      },
      parallel);

  for (std::size_t i = 0; i < n; ++i) {
    const Matching m = match_detections(preds[i], persons[i], config.confidence, config.iou,
                                        config.target_class);
    ImageRecord r;
    r.image = data.records[i].image_path;
    r.gt_count = static_cast<int>(persons[i].size());
    r.matched_count = m.matched;
    for (std::size_t k = 0; k < persons[i].size(); ++k) {
      if (!flags[i][k]) continue;
      ++r.patched_count;
      if (m.gt_to_pred[k] < 0) ++r.evaded_count;
    }
    report.per_image.push_back(std::move(r));
  }

  std::vector<std::string> problems;
  try {
    report.asr = compute_asr(report.per_image);
  } catch (const std::domain_error& ex) {
    problems.emplace_back(ex.what());
  }
  try {
    report.ap = compute_ap(preds, persons, config.iou, config.target_class, config.interpolation);
  } catch (const std::domain_error& ex) {
    problems.emplace_back(ex.what());
  }
  for (const auto& p : problems) report.error += (report.error.empty() ? "" : "; ") + p;
  return report;
}

std::vector<EvalReport> cross_dataset_eval(const std::optional<PatchArtifact>& patch,
                                           std::span<const Dataset> datasets,
                                           const DetectorBackend& detector, const EvalConfig& config) {
  std::vector<EvalReport> out;
  for (const auto& d : datasets) out.push_back(evaluate_dataset(d, patch, detector, config));
  return out;
}

Dataset load_dataset(const DatasetSource& source) {
  Dataset d;
  d.id = source.id;
  d.records = read_manifest(source.manifest);
  for (const auto& r : d.records) d.images.push_back(load_image(r.image_path));
  return d;
}

std::vector<EvalReport> cross_dataset_eval(const std::optional<PatchArtifact>& patch,
                                           std::span<const DatasetSource> sources,
                                           const DetectorBackend& detector, const EvalConfig& config) {
  std::vector<EvalReport> out;
  for (const auto& src : sources) {
    try {
      out.push_back(evaluate_dataset(load_dataset(src), patch, detector, config));
    } catch (const std::exception& ex) {
      EvalReport failed;
      failed.dataset_id = src.id;
      failed.patch_id = patch ? patch->id : "none";
      failed.confidence = config.confidence;
      failed.iou = config.iou;
      failed.error = ex.what();
      out.push_back(std::move(failed));
    }
  }
  return out;
}

std::string format_report_table(std::span<const EvalReport> reports) {
  std::ostringstream out;
  auto cell = [](const std::optional<double>& v) {
    std::ostringstream s;
    if (v) {
      s << std::fixed << std::setprecision(1) << 100.0 * *v;
    } else {
      s << "-";
    }
    return s.str();
  };
  out << std::left << std::setw(20) << "dataset" << std::setw(20) << "patch" << std::right
      << std::setw(8) << "ASR%" << std::setw(8) << "AP%" << "  note\n";
  for (const auto& r : reports) {
    out << std::left << std::setw(20) << r.dataset_id << std::setw(20) << r.patch_id << std::right
        << std::setw(8) << cell(r.asr) << std::setw(8) << cell(r.ap) << "  " << r.error << '\n';
  }
  return out.str();
}

}  // namespace badpatch

#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "badpatch/backends.hpp"
#include "badpatch/detection.hpp"
#include "badpatch/render.hpp"

namespace badpatch {

/// One manifest line: image path plus (class, box) annotations and a
/// per-box flag marking persons that carry the patch.
struct AnnotationRecord {
  struct Entry {
    int cls = 0;
    Box box;
  };
  std::string image_path;
  std::vector<Entry> boxes;
  std::vector<bool> patched;

  void validate(int width, int height) const;
  nlohmann::json to_json() const;
  static AnnotationRecord from_json(const nlohmann::json& j);
};

/// JSON-lines manifest I/O. Relative image paths resolve against the manifest's directory.
std::vector<AnnotationRecord> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, std::span<const AnnotationRecord> records);

struct Matching {
  std::vector<int> pred_to_gt;  // -1 when unmatched
  std::vector<int> gt_to_pred;  // -1 when missed
  int matched = 0;
};

/// Greedy one-to-one matching in descending confidence for class `cls`. A pair
/// counts only with confidence > conf and IoU > iou_t; each prediction takes
/// the free ground truth it overlaps most.
Matching match_detections(const Detections& preds, std::span<const Box> gt, double conf,
                          double iou_t, int cls = 0);

struct ImageRecord {
  std::string image;
  int gt_count = 0;
  int matched_count = 0;
  int patched_count = 0;
  int evaded_count = 0;
};

/// Evaded patched persons over all patched persons. Throws std::domain_error
/// when there are none.
double compute_asr(std::span<const ImageRecord> records);

enum class ApInterpolation { all_point, eleven_point };

ApInterpolation parse_interpolation(std::string_view name);
std::string_view to_string(ApInterpolation interp);

struct PrCurve {
  std::vector<double> precision;
  std::vector<double> recall;
};

/// Precision/recall after each prediction (confidence > conf), ranked by
/// descending confidence across all images. A prediction is a true positive
/// when its best-IoU ground truth exceeds iou_t and is still unclaimed.
PrCurve pr_curve(std::span<const Detections> preds, std::span<const std::vector<Box>> gt,
                 double iou_t, int cls = 0, double conf = 0.0);

/// Area under the interpolated PR curve. Throws std::domain_error without ground truth.
double compute_ap(std::span<const Detections> preds, std::span<const std::vector<Box>> gt,
                  double iou_t, int cls = 0, ApInterpolation interp = ApInterpolation::all_point,
                  double conf = 0.0);
double average_precision(const PrCurve& curve, ApInterpolation interp);

double cosine_similarity(std::span<const double> a, std::span<const double> b);
double image_similarity(const Image& a, const Image& b, const SimilarityBackend& scorer,
                        const Mask* mask = nullptr);
/// Similarity between a patch and a text description; throws ConfigError without a scorer.
double naturalness_score(const Image& patch, const Mask* mask, std::string_view description,
                         const SimilarityBackend* scorer);

struct EvalConfig {
  double confidence = 0.5;
  double iou = 0.5;
  double tau = 0.2;
  int target_class = 0;
  ApInterpolation interpolation = ApInterpolation::all_point;
  bool parallel = false;

  void validate() const;
};

struct EvalReport {
  std::string dataset_id;
  std::string patch_id;
  std::optional<double> asr;
  std::optional<double> ap;
  double confidence = 0.5;
  double iou = 0.5;
  std::vector<ImageRecord> per_image;
  std::string error;

  bool ok() const { return error.empty(); }
  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

struct Dataset {
  std::string id;
  std::vector<AnnotationRecord> records;
  std::vector<Image> images;
};

struct PatchArtifact {
  std::string id;
  Image image;
  Mask mask;
};

/// Pastes the patch (identity augmentation) on every flagged person and scores
/// the detector. Without a patch this measures the detector's own miss rate.
EvalReport evaluate_dataset(const Dataset& data, const std::optional<PatchArtifact>& patch,
                            const DetectorBackend& detector, const EvalConfig& config);

std::vector<EvalReport> cross_dataset_eval(const std::optional<PatchArtifact>& patch,
                                           std::span<const Dataset> datasets,
                                           const DetectorBackend& detector, const EvalConfig& config);

struct DatasetSource {
  std::string id;
  std::filesystem::path manifest;
};

/// Loads every manifest and its images; a dataset that fails to load yields a
/// report carrying the error while the others proceed.
std::vector<EvalReport> cross_dataset_eval(const std::optional<PatchArtifact>& patch,
                                           std::span<const DatasetSource> sources,
                                           const DetectorBackend& detector, const EvalConfig& config);

Dataset load_dataset(const DatasetSource& source);

/// Fixed-width table, one row per dataset: ASR (higher is stronger) and AP (lower is stronger).
std::string format_report_table(std::span<const EvalReport> reports);

}  // namespace badpatch

#pragma once

// Detection matching and interpolated average precision (11 and 40 recall
// positions) on 3D and bird's-eye-view IoU, with KITTI difficulty filtering.
//
// At difficulty d a ground truth whose own difficulty is harder than d is
// ignored, and so is a detection whose 2D box is shorter than d's minimum
// height. R40 samples recalls 1/40 .. 40/40; R11 samples 0, 0.1 .. 1.0.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pct/dataio.hpp"
#include "pct/geometry.hpp"

namespace pct::eval {

using dataio::Difficulty;
using geometry::Box3D;
using geometry::RoI2D;

enum class Metric { Box3D, Bev };
enum class RecallMode { R11, R40 };

const char* metric_name(Metric m);  // "3d", "bev"
Metric parse_metric(std::string_view name);
const char* recall_mode_name(RecallMode m);  // "r11", "r40"
RecallMode parse_recall_mode(std::string_view name);

struct GroundTruth {
  Box3D box;
  RoI2D bbox;
  Difficulty difficulty{Difficulty::Easy};
};

struct Detection {
  Box3D box;
  RoI2D bbox;
};

struct FrameAnnotations {
  std::vector<GroundTruth> gts;
  std::vector<RoI2D> dont_care;
  std::vector<Detection> dets;  // score lives in box.score
};

/// Frame for one class from a label file and a detection list.
FrameAnnotations make_frame(const dataio::LabelFile& labels, const std::vector<dataio::LabelRecord>& dets,
                            int class_id = 0);

enum class MatchLabel { TP, FP, Ignored };

struct FrameMatch {
  std::vector<MatchLabel> det_labels;  // indexed like frame.dets
  std::vector<bool> gt_matched;
  int n_gt{0};  // ground truths that count at this difficulty
};

double min_height(Difficulty d);

/// Detections in descending score (ties by index) take the highest-IoU
/// unmatched counted ground truth at or above `threshold` (ties by index).
/// Otherwise a detection overlapping an ignored ground truth at the threshold,
/// or covered at least half by a DontCare region, is Ignored; anything else is FP.
FrameMatch match_frame(const FrameAnnotations& frame, Metric metric, double threshold, Difficulty difficulty);

struct PRCurve {
  RecallMode mode{RecallMode::R40};
  int n_gt{0};
  /// Cumulative true positives after the k-th detection in score order.
  std::vector<int> tp;
  /// (recall, precision) after each detection.
  std::vector<std::pair<double, double>> samples;
};

/// Builds the curve from (score, label) pairs aggregated over frames.
PRCurve build_curve(std::vector<std::pair<double, MatchLabel>> scored, int n_gt);

/// Mean interpolated precision at the mode's recall positions, x100; nullopt
/// when there is no ground truth.
std::optional<double> average_precision(const PRCurve& curve, RecallMode mode);
std::optional<double> ap_r40(const PRCurve& curve);
std::optional<double> ap_r11(const PRCurve& curve);

struct EvalReport {
  Metric metric{Metric::Box3D};
  double threshold{0.7};
  Difficulty difficulty{Difficulty::Moderate};
  std::optional<double> ap_r11;
  std::optional<double> ap_r40;
  PRCurve curve;

  nlohmann::json to_json() const;
};

EvalReport evaluate(const std::vector<FrameAnnotations>& frames, Difficulty difficulty, Metric metric,
                    double threshold);

/// Plain-text table: one row per metric, columns Easy / Moderate / Hard.
std::string format_table(const std::vector<EvalReport>& reports, RecallMode mode);

}  // namespace pct::eval

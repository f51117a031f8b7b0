#include "pct/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace pct::eval {

const char* metric_name(Metric m) { return m == Metric::Box3D ? "3d" : "bev"; }

Metric parse_metric(std::string_view name) {
  if (name == "3d") return Metric::Box3D;
  if (name == "bev") return Metric::Bev;
  throw UsageError("unknown metric '" + std::string(name) + "' (expected 3d or bev)");
}

const char* recall_mode_name(RecallMode m) { return m == RecallMode::R11 ? "r11" : "r40"; }

RecallMode parse_recall_mode(std::string_view name) {
  if (name == "r11") return RecallMode::R11;
  if (name == "r40") return RecallMode::R40;
  throw UsageError("unknown recall mode '" + std::string(name) + "' (expected r11 or r40)");
}

FrameAnnotations make_frame(const dataio::LabelFile& labels, const std::vector<dataio::LabelRecord>& dets,
                            int class_id) {
  FrameAnnotations f;
  for (const dataio::LabelRecord& r : labels.objects) {
    if (dataio::class_id_of(r.type) != class_id) continue;
    f.gts.push_back({r.box(), r.roi(), dataio::difficulty_of(r)});
  }
  for (const dataio::LabelRecord& r : labels.dont_care) f.dont_care.push_back(r.roi());
  for (const dataio::LabelRecord& r : dets) {
    if (dataio::class_id_of(r.type) != class_id) continue;
    f.dets.push_back({r.box(), r.roi()});
  }
  return f;
}

double min_height(Difficulty d) {
  switch (d) {
    case Difficulty::Easy: return 40.0;
    case Difficulty::Moderate: return 25.0;
    case Difficulty::Hard: return 25.0;
    case Difficulty::Ignored: break;
  }
  throw UsageError("min_height: no evaluation at the Ignored level");
}

namespace {

double iou(const Box3D& a, const Box3D& b, Metric m) {
  return m == Metric::Box3D ? geometry::iou_3d(a, b) : geometry::bev_iou(a, b);
}

double covered_fraction(const RoI2D& det, const RoI2D& region) {
  const double w = std::min(det.right, region.right) - std::max(det.left, region.left);
  const double h = std::min(det.bottom, region.bottom) - std::max(det.top, region.top);
  if (w <= 0 || h <= 0) return 0.0;
  return w * h / (det.width() * det.height());
}

}  // namespace

FrameMatch match_frame(const FrameAnnotations& frame, Metric metric, double threshold, Difficulty difficulty) {
  FrameMatch m;
  m.det_labels.assign(frame.dets.size(), MatchLabel::FP);
  m.gt_matched.assign(frame.gts.size(), false);
  std::vector<bool> gt_counted(frame.gts.size());
  for (std::size_t g = 0; g < frame.gts.size(); ++g) {
    gt_counted[g] = static_cast<int>(frame.gts[g].difficulty) <= static_cast<int>(difficulty);
    if (gt_counted[g]) ++m.n_gt;
  }
  std::vector<std::size_t> order(frame.dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frame.dets[a].box.score > frame.dets[b].box.score; });
  const double floor_height = min_height(difficulty);
  for (std::size_t k : order) {
    const Detection& det = frame.dets[k];
    if (det.bbox.height() < floor_height) {
      m.det_labels[k] = MatchLabel::Ignored;
      continue;
    }
    int best = -1;
    double best_iou = -1.0;
    bool hits_ignored = false;
    for (std::size_t g = 0; g < frame.gts.size(); ++g) {
      const double v = iou(det.box, frame.gts[g].box, metric);
      if (v < threshold) continue;
      if (!gt_counted[g]) {
        hits_ignored = true;
        continue;
      }
      if (m.gt_matched[g]) continue;
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      m.det_labels[k] = MatchLabel::TP;
      m.gt_matched[best] = true;
      continue;
    }
    bool in_dont_care = hits_ignored;
    for (const RoI2D& region : frame.dont_care) {
      if (in_dont_care) break;
      if (det.bbox.valid() && covered_fraction(det.bbox, region) >= 0.5) in_dont_care = true;
    }
    if (in_dont_care) m.det_labels[k] = MatchLabel::Ignored;
  }
  return m;
}

PRCurve build_curve(std::vector<std::pair<double, MatchLabel>> scored, int n_gt) {
  PRCurve c;
  c.n_gt = n_gt;
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  int tp = 0, seen = 0;
  for (const auto& [score, label] : scored) {
    if (label == MatchLabel::Ignored) continue;
    ++seen;
    if (label == MatchLabel::TP) ++tp;
    c.tp.push_back(tp);
    const double recall = n_gt > 0 ? static_cast<double>(tp) / n_gt : 0.0;
    c.samples.emplace_back(recall, static_cast<double>(tp) / seen);
  }
  return c;
}

std::optional<double> average_precision(const PRCurve& curve, RecallMode mode) {
  if (curve.n_gt <= 0) return std::nullopt;
  const int positions = mode == RecallMode::R40 ? 40 : 10;
  const int first = mode == RecallMode::R40 ? 1 : 0;
  // Best precision among points whose recall reaches each position, compared
  // in integers: tp / n_gt >= i / positions  <=>  tp * positions >= i * n_gt.
  double sum = 0;
  for (int i = first; i <= positions; ++i) {
    double best = 0;
    for (std::size_t k = 0; k < curve.tp.size(); ++k) {
      if (static_cast<long>(curve.tp[k]) * positions >= static_cast<long>(i) * curve.n_gt) {
        best = std::max(best, curve.samples[k].second);
      }
    }
    sum += best;
  }
  return 100.0 * sum / (positions - first + 1);
}

std::optional<double> ap_r40(const PRCurve& curve) { return average_precision(curve, RecallMode::R40); }
std::optional<double> ap_r11(const PRCurve& curve) { return average_precision(curve, RecallMode::R11); }

nlohmann::json EvalReport::to_json() const {
  nlohmann::json pr = nlohmann::json::array();
  for (const auto& [r, p] : curve.samples) pr.push_back({r, p});
  return {{"metric", metric_name(metric)},
          {"threshold", threshold},
          {"difficulty", dataio::difficulty_name(difficulty)},
          {"ap_r11", ap_r11 ? nlohmann::json(*ap_r11) : nlohmann::json(nullptr)},
          {"ap_r40", ap_r40 ? nlohmann::json(*ap_r40) : nlohmann::json(nullptr)},
          {"pr", pr}};
}

EvalReport evaluate(const std::vector<FrameAnnotations>& frames, Difficulty difficulty, Metric metric,
                    double threshold) {
  std::vector<std::pair<double, MatchLabel>> scored;
  int n_gt = 0;
  for (const FrameAnnotations& f : frames) {
    const FrameMatch m = match_frame(f, metric, threshold, difficulty);
    n_gt += m.n_gt;
    for (std::size_t k = 0; k < f.dets.size(); ++k) scored.emplace_back(f.dets[k].box.score, m.det_labels[k]);
  }
  EvalReport r;
  r.metric = metric;
  r.threshold = threshold;
  r.difficulty = difficulty;
  r.curve = build_curve(std::move(scored), n_gt);
  r.ap_r11 = ap_r11(r.curve);
  r.ap_r40 = ap_r40(r.curve);
  return r;
}

std::string format_table(const std::vector<EvalReport>& reports, RecallMode mode) {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %-6s %9s %9s %9s\n", "metric", "iou", "Easy", "Moderate", "Hard");
  out << line;
  for (Metric m : {Metric::Box3D, Metric::Bev}) {
    std::vector<double> thresholds;
    for (const EvalReport& r : reports) {
      if (r.metric == m && std::find(thresholds.begin(), thresholds.end(), r.threshold) == thresholds.end()) {
        thresholds.push_back(r.threshold);
      }
    }
    for (double t : thresholds) {
      std::string cells[3] = {"-", "-", "-"};
      for (const EvalReport& r : reports) {
        if (r.metric != m || r.threshold != t || r.difficulty == Difficulty::Ignored) continue;
        const std::optional<double> ap = mode == RecallMode::R40 ? r.ap_r40 : r.ap_r11;
        char cell[32];
        if (ap) {
          std::snprintf(cell, sizeof cell, "%.2f", *ap);
        } else {
          std::snprintf(cell, sizeof cell, "n/a");
        }
        cells[static_cast<int>(r.difficulty)] = cell;
      }
      std::snprintf(line, sizeof line, "%-10s %-6.2f %9s %9s %9s\n", m == Metric::Box3D ? "AP_3D" : "AP_BEV", t,
                    cells[0].c_str(), cells[1].c_str(), cells[2].c_str());
      out << line;
    }
  }
  out << "(" << recall_mode_name(mode) << ")\n";
  return out.str();
}

}  // namespace pct::eval

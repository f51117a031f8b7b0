#include "pct/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <tuple>

namespace pct::probe {

const char* factor_name(Factor f) {
  switch (f) {
    case Factor::Dimension: return "dimension";
    case Factor::Rotation: return "rotation";
    case Factor::X: return "x";
    case Factor::Y: return "y";
    case Factor::Z: return "z";
    case Factor::Location: return "location(xyz)";
  }
  return "?";
}

std::vector<int> assign(const std::vector<Box3D>& dets, const std::vector<Box3D>& gts, double threshold) {
  std::vector<std::tuple<double, int, int>> pairs;
  for (std::size_t d = 0; d < dets.size(); ++d) {
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = geometry::bev_iou(dets[d], gts[g]);
      if (v >= threshold && v > 0) pairs.emplace_back(v, static_cast<int>(d), static_cast<int>(g));
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
    if (std::get<1>(a) != std::get<1>(b)) return std::get<1>(a) < std::get<1>(b);
    return std::get<2>(a) < std::get<2>(b);
  });
  std::vector<int> out(dets.size(), -1);
  std::vector<bool> taken(gts.size(), false);
  for (const auto& [v, d, g] : pairs) {
    if (out[d] >= 0 || taken[g]) continue;
    out[d] = g;
    taken[g] = true;
  }
  return out;
}

std::vector<Box3D> substitute(const std::vector<Box3D>& dets, const std::vector<Box3D>& gts, Factor factor,
                              const std::vector<int>& assignment) {
  if (assignment.size() != dets.size()) throw UsageError("substitute: assignment does not match detections");
  std::vector<Box3D> out = dets;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (assignment[i] < 0) continue;
    const Box3D& gt = gts.at(assignment[i]);
    Box3D& b = out[i];
    switch (factor) {
      case Factor::Dimension:
        b.h = gt.h;
        b.w = gt.w;
        b.l = gt.l;
        break;
      case Factor::Rotation: b.theta = gt.theta; break;
      case Factor::X: b.x = gt.x; break;
      case Factor::Y: b.y = gt.y; break;
      case Factor::Z: b.z = gt.z; break;
      case Factor::Location:
        b.x = gt.x;
        b.y = gt.y;
        b.z = gt.z;
        break;
    }
  }
  return out;
}

namespace {

double ap_or_zero(const std::vector<eval::FrameAnnotations>& frames, dataio::Difficulty d, eval::Metric m,
                  double threshold, eval::RecallMode mode) {
  const eval::EvalReport r = eval::evaluate(frames, d, m, threshold);
  const std::optional<double> ap = mode == eval::RecallMode::R40 ? r.ap_r40 : r.ap_r11;
  return ap.value_or(0.0);
}

ProbeRow evaluate_row(std::string name, const std::vector<eval::FrameAnnotations>& frames, double threshold,
                      eval::RecallMode mode) {
  ProbeRow row;
  row.name = std::move(name);
  auto cell = [&](dataio::Difficulty d) {
    return ProbeCell{ap_or_zero(frames, d, eval::Metric::Box3D, threshold, mode),
                     ap_or_zero(frames, d, eval::Metric::Bev, threshold, mode)};
  };
  row.moderate = cell(dataio::Difficulty::Moderate);
  row.easy = cell(dataio::Difficulty::Easy);
  row.hard = cell(dataio::Difficulty::Hard);
  return row;
}

}  // namespace

ProbeTable probe_report(const std::vector<eval::FrameAnnotations>& frames, double threshold, eval::RecallMode mode,
                        double assign_threshold) {
  ProbeTable table;
  table.threshold = threshold;
  table.mode = mode;
  table.rows.push_back(evaluate_row("Baseline", frames, threshold, mode));
  std::vector<std::vector<int>> assignments;
  for (const eval::FrameAnnotations& f : frames) {
    std::vector<Box3D> dets, gts;
    for (const eval::Detection& d : f.dets) dets.push_back(d.box);
    for (const eval::GroundTruth& g : f.gts) gts.push_back(g.box);
    assignments.push_back(assign(dets, gts, assign_threshold));
  }
  for (Factor factor : kAllFactors) {
    std::vector<eval::FrameAnnotations> swapped = frames;
    for (std::size_t i = 0; i < swapped.size(); ++i) {
      std::vector<Box3D> dets, gts;
      for (const eval::Detection& d : frames[i].dets) dets.push_back(d.box);
      for (const eval::GroundTruth& g : frames[i].gts) gts.push_back(g.box);
      const std::vector<Box3D> out = substitute(dets, gts, factor, assignments[i]);
      for (std::size_t k = 0; k < out.size(); ++k) swapped[i].dets[k].box = out[k];
    }
    table.rows.push_back(evaluate_row(factor_name(factor), swapped, threshold, mode));
  }
  return table;
}

std::string ProbeTable::markdown() const {
  std::ostringstream out;
  char buf[64];
  out << "| Replaced | Mod. AP3D/APBEV | Easy AP3D/APBEV | Hard AP3D/APBEV |\n";
  out << "|---|---|---|---|\n";
  for (const ProbeRow& r : rows) {
    out << "| " << r.name;
    for (const ProbeCell* c : {&r.moderate, &r.easy, &r.hard}) {
      std::snprintf(buf, sizeof buf, " | %.2f/%.2f", c->ap_3d, c->ap_bev);
      out << buf;
    }
    out << " |\n";
  }
  std::snprintf(buf, sizeof buf, "\nIoU %.2f, %s\n", threshold, eval::recall_mode_name(mode));
  out << buf;
  return out.str();
}

std::string ProbeTable::csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "factor,mod_ap3d,mod_apbev,easy_ap3d,easy_apbev,hard_ap3d,hard_apbev\n";
  for (const ProbeRow& r : rows) {
    out << r.name;
    for (const ProbeCell* c : {&r.moderate, &r.easy, &r.hard}) out << ',' << c->ap_3d << ',' << c->ap_bev;
    out << '\n';
  }
  return out.str();
}

std::vector<eval::Detection> noisy_detections(const std::vector<eval::GroundTruth>& gts, const NoiseSpec& noise,
                                              std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<eval::Detection> out;
  for (const eval::GroundTruth& g : gts) {
    eval::Detection d;
    d.bbox = g.bbox;
    d.box = g.box;
    d.box.x += noise.sigma_x * normal(rng);
    d.box.y += noise.sigma_y * normal(rng);
    d.box.z += noise.sigma_z * normal(rng);
    d.box.h *= std::exp(noise.sigma_log_dim * normal(rng));
    d.box.w *= std::exp(noise.sigma_log_dim * normal(rng));
    d.box.l *= std::exp(noise.sigma_log_dim * normal(rng));
    d.box.theta = geometry::normalize_angle(d.box.theta + noise.sigma_theta * normal(rng));
    d.box.score = unit(rng);
    out.push_back(d);
  }
  return out;
}

}  // namespace pct::probe

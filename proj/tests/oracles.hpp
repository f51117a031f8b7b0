#pragma once

// Independent reference implementations shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "pct/eval.hpp"
#include "pct/geometry.hpp"

namespace oracle {

using pct::geometry::Box3D;

// True when ground-plane point (x, z) lies in the footprint of b, tested in
// the box's local frame rather than through a polygon.
inline bool in_footprint(const Box3D& b, double x, double z) {
  const double c = std::cos(b.theta), s = std::sin(b.theta);
  const double dx = x - b.x, dz = z - b.z;
  // Inverse of R_y restricted to the ground plane.
  const double lx = c * dx - s * dz;
  const double lz = s * dx + c * dz;
  return std::abs(lx) <= b.l / 2 && std::abs(lz) <= b.w / 2;
}

inline void footprint_bounds(const Box3D& b, double& x0, double& x1, double& z0, double& z1) {
  const double r = 0.5 * std::hypot(b.l, b.w);
  x0 = std::min(x0, b.x - r);
  x1 = std::max(x1, b.x + r);
  z0 = std::min(z0, b.z - r);
  z1 = std::max(z1, b.z + r);
}

// Stratified Monte-Carlo estimate of the intersection area: one jittered
// sample per cell of an n x n grid over the joint bounding square. Footprint
// areas are exact (l * w).
inline double mc_bev_iou(const Box3D& a, const Box3D& b, int n, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(0.0, 1.0);
  double x0 = 1e300, x1 = -1e300, z0 = 1e300, z1 = -1e300;
  footprint_bounds(a, x0, x1, z0, z1);
  footprint_bounds(b, x0, x1, z0, z1);
  const double dx = (x1 - x0) / n, dz = (z1 - z0) / n;
  long hits = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double x = x0 + (i + jitter(rng)) * dx;
      const double z = z0 + (j + jitter(rng)) * dz;
      if (in_footprint(a, x, z) && in_footprint(b, x, z)) ++hits;
    }
  }
  const double inter = static_cast<double>(hits) * dx * dz;
  return inter / (a.l * a.w + b.l * b.w - inter);
}

// Brute-force AP reference. Matching is re-derived per frame by scanning
// detections from the highest score; the PR curve is recomputed from scratch
// for every score cutoff.
struct BruteForce {
  std::optional<double> r11, r40;
};

inline BruteForce brute_force_ap(const std::vector<pct::eval::FrameAnnotations>& frames,
                                 pct::dataio::Difficulty d, pct::eval::Metric metric, double thr) {
  using pct::dataio::Difficulty;
  const double floor_h = d == Difficulty::Easy ? 40.0 : 25.0;
  struct Scored {
    double score;
    int state;  // 0 fp, 1 tp, 2 ignored
  };
  std::vector<Scored> all;
  long n_gt = 0;
  for (const auto& f : frames) {
    std::vector<int> taken(f.gts.size(), 0);
    std::vector<int> counted(f.gts.size(), 0);
    for (std::size_t g = 0; g < f.gts.size(); ++g) {
      counted[g] = static_cast<int>(f.gts[g].difficulty) <= static_cast<int>(d);
      n_gt += counted[g];
    }
    std::vector<int> done(f.dets.size(), 0);
    for (std::size_t round = 0; round < f.dets.size(); ++round) {
      // Highest remaining score; earliest index breaks ties.
      int k = -1;
      for (std::size_t i = 0; i < f.dets.size(); ++i) {
        if (done[i]) continue;
        if (k < 0 || f.dets[i].box.score > f.dets[k].box.score) k = static_cast<int>(i);
      }
      done[k] = 1;
      const auto& det = f.dets[k];
      int state = 0;
      if (det.bbox.bottom - det.bbox.top < floor_h) {
        state = 2;
      } else {
        int best = -1;
        double best_v = -1;
        bool ignored_hit = false;
        for (std::size_t g = 0; g < f.gts.size(); ++g) {
          const double v = metric == pct::eval::Metric::Bev ? pct::geometry::bev_iou(det.box, f.gts[g].box)
                                                            : pct::geometry::iou_3d(det.box, f.gts[g].box);
          if (!(v >= thr)) continue;
          if (!counted[g]) {
            ignored_hit = true;
          } else if (!taken[g] && v > best_v) {
            best_v = v;
            best = static_cast<int>(g);
          }
        }
        if (best >= 0) {
          taken[best] = 1;
          state = 1;
        } else if (ignored_hit) {
          state = 2;
        } else {
          for (const auto& r : f.dont_care) {
            const double iw = std::min(det.bbox.right, r.right) - std::max(det.bbox.left, r.left);
            const double ih = std::min(det.bbox.bottom, r.bottom) - std::max(det.bbox.top, r.top);
            if (iw > 0 && ih > 0 && iw * ih >= 0.5 * det.bbox.width() * det.bbox.height()) state = 2;
          }
        }
      }
      all.push_back({det.box.score, state});
    }
  }
  BruteForce out;
  if (n_gt == 0) return out;
  std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  std::vector<const Scored*> kept;
  for (const auto& s : all)
    if (s.state != 2) kept.push_back(&s);
  auto interp = [&](int num, int den) {
    double best = 0;
    for (std::size_t cut = 1; cut <= kept.size(); ++cut) {
      long tp = 0;
      for (std::size_t i = 0; i < cut; ++i) tp += kept[i]->state == 1;
      if (tp * den >= static_cast<long>(num) * n_gt) best = std::max(best, static_cast<double>(tp) / cut);
    }
    return best;
  };
  double s11 = 0, s40 = 0;
  for (int i = 0; i <= 10; ++i) s11 += interp(i, 10);
  for (int i = 1; i <= 40; ++i) s40 += interp(i, 40);
  out.r11 = 100.0 * s11 / 11;
  out.r40 = 100.0 * s40 / 40;
  return out;
}

// Random frames exercising every matching rule: all difficulty levels,
// near-threshold localization noise, duplicates, false positives, short
// detections and DontCare regions. Scores are continuous, so ties do not occur.
inline std::vector<pct::eval::FrameAnnotations> random_frames(int n, std::mt19937_64& rng) {
  using pct::dataio::Difficulty;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto bbox = [&](double h) {
    const double left = 1000 * unit(rng), top = 100 * unit(rng);
    return pct::geometry::RoI2D{left, top, left + 1.5 * h, top + h, 0, 1};
  };
  std::vector<pct::eval::FrameAnnotations> frames(n);
  for (auto& f : frames) {
    const int n_gt = static_cast<int>(rng() % 7);
    for (int g = 0; g < n_gt; ++g) {
      Box3D b;
      b.x = 20 * unit(rng) - 10;
      b.y = 1.6 + 0.1 * normal(rng);
      b.z = 5 + 40 * unit(rng);
      b.h = 1.5 + 0.1 * normal(rng);
      b.w = 1.6 + 0.1 * normal(rng);
      b.l = 3.9 + 0.3 * normal(rng);
      b.theta = 6 * unit(rng) - 3;
      f.gts.push_back({b, bbox(20 + 60 * unit(rng)), static_cast<Difficulty>(rng() % 4)});
    }
    for (const auto& g : f.gts) {
      const int copies = static_cast<int>(rng() % 3);
      for (int c = 0; c < copies; ++c) {
        pct::eval::Detection d;
        d.box = g.box;
        const double s = 0.4 * unit(rng);
        d.box.x += s * normal(rng);
        d.box.z += s * normal(rng);
        d.box.y += 0.5 * s * normal(rng);
        d.box.theta += 0.5 * s * normal(rng);
        d.box.score = unit(rng);
        d.bbox = g.bbox;
        if (unit(rng) < 0.15) d.bbox.bottom = d.bbox.top + 20 + 10 * unit(rng);
        f.dets.push_back(d);
      }
    }
    const int n_fp = static_cast<int>(rng() % 3);
    for (int k = 0; k < n_fp; ++k) {
      pct::eval::Detection d;
      d.box.x = 20 * unit(rng) - 10;
      d.box.y = 1.6;
      d.box.z = 5 + 40 * unit(rng);
      d.box.h = 1.5;
      d.box.w = 1.6;
      d.box.l = 3.9;
      d.box.score = unit(rng);
      d.bbox = bbox(20 + 60 * unit(rng));
      f.dets.push_back(d);
    }
    if (unit(rng) < 0.5 && !f.dets.empty()) {
      // A DontCare region over a random detection's box.
      const auto& d = f.dets[rng() % f.dets.size()].bbox;
      f.dont_care.push_back({d.left - 5, d.top - 5, d.right - 0.3 * d.width(), d.bottom + 5, 0, 1});
    }
  }
  return frames;
}

}  // namespace oracle

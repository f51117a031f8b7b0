#pragma once

// Ground-truth substitution study: overwrite one predicted factor of every
// assigned detection with its ground-truth value and re-evaluate.

#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "pct/eval.hpp"
#include "pct/geometry.hpp"

namespace pct::probe {

using geometry::Box3D;

enum class Factor { Dimension, Rotation, X, Y, Z, Location };

inline constexpr Factor kAllFactors[] = {Factor::Dimension, Factor::Rotation, Factor::X,
                                         Factor::Y,         Factor::Z,        Factor::Location};

const char* factor_name(Factor f);

/// For each detection, the index of its ground truth or -1. Pairs are taken
/// greedily in descending BEV IoU (ties by detection, then ground-truth index),
/// one to one, down to `threshold`.
std::vector<int> assign(const std::vector<Box3D>& dets, const std::vector<Box3D>& gts, double threshold = 0.1);

std::vector<Box3D> substitute(const std::vector<Box3D>& dets, const std::vector<Box3D>& gts, Factor factor,
                              const std::vector<int>& assignment);

struct ProbeCell {
  double ap_3d{0};
  double ap_bev{0};
};

struct ProbeRow {
  std::string name;
  ProbeCell moderate, easy, hard;
};

struct ProbeTable {
  double threshold{0.7};
  eval::RecallMode mode{eval::RecallMode::R40};
  std::vector<ProbeRow> rows;  // baseline first, then one row per factor

  std::string markdown() const;
  std::string csv() const;
};

/// Baseline plus one row per factor. Undefined AP (no ground truth) is 0.
ProbeTable probe_report(const std::vector<eval::FrameAnnotations>& frames, double threshold,
                        eval::RecallMode mode = eval::RecallMode::R40, double assign_threshold = 0.1);

struct NoiseSpec {
  double sigma_x{0.15};
  double sigma_y{0.15};
  double sigma_z{0.6};
  double sigma_log_dim{0.04};
  double sigma_theta{0.03};
};

/// Detections made from ground truth plus Gaussian noise, one per ground truth.
std::vector<eval::Detection> noisy_detections(const std::vector<eval::GroundTruth>& gts, const NoiseSpec& noise,
                                              std::mt19937_64& rng);

}  // namespace pct::probe

#pragma once

// Synthetic scenes: boxes on a ground band in front of a fixed camera, a
// ray-cast depth map with noise, jittered RoIs and a context feature grid.
//
// Dataset layout written by write_dataset:
//   manifest.json             {"format": "pct-synth-1", "n_scenes", "spec": {...}}
//   calib/NNNNNN.txt          KITTI calibration
//   label/NNNNNN.txt          KITTI labels
//   depth/NNNNNN.dmap         DMAP depth map
//   roi/NNNNNN.txt            RoI lines
//   feat/NNNNNN.fgrd          FGRD feature grid
// Scene i is generated from its own generator seeded by splitmix64 of
// (seed, i), so any subset of scenes can be regenerated independently.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pct/dataio.hpp"
#include "pct/geometry.hpp"

namespace pct::synth {

using dataio::CalibRecord;
using dataio::LabelRecord;
using dataio::RoIRecord;
using geometry::Box3D;
using geometry::CameraIntrinsics;
using geometry::DepthMap;
using geometry::FeatureGrid;

struct DimensionPrior {
  Eigen::Vector3d mean{1.53, 1.63, 3.88};  // h, w, l
  Eigen::Vector3d sd{0.14, 0.10, 0.43};
};

struct SceneSpec {
  std::uint64_t seed{42};
  int min_boxes{2};
  int max_boxes{5};
  double min_depth{6.0};
  double max_depth{40.0};
  double yaw_min{-std::numbers::pi};
  double yaw_max{std::numbers::pi};
  double ground_y{1.65};
  double ground_sd{0.1};
  std::array<DimensionPrior, 3> dims{};  // per class id
  std::array<double, 3> class_weights{1.0, 0.0, 0.0};
  double depth_noise{0.2};  // per-pixel sigma, meters
  double depth_bias{0.0};  // per-object sigma as a fraction of depth
  double invalid_fraction{0.0};  // pixels dropped to NaN
  double roi_jitter{2.0};  // per-edge sigma, pixels
  double background_depth{60.0};
  double max_bev_iou{0.3};
  int min_visible_pixels{64};
  CameraIntrinsics camera{700.0, 700.0, 620.0, 190.0};
  int image_width{1240};
  int image_height{370};
  int feature_stride{8};
  int feature_channels{64};

  void validate() const;
};

void to_json(nlohmann::json& j, const SceneSpec& s);
void from_json(const nlohmann::json& j, SceneSpec& s);

struct Scene {
  CalibRecord calib;
  std::vector<LabelRecord> labels;
  DepthMap depth;
  std::vector<RoIRecord> rois;
  FeatureGrid features;
  /// Per pixel, the index into labels of the box hit first, -1 for background.
  Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> box_ids;
  /// Rendered depth before noise.
  DepthMap clean_depth;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t scene_seed(std::uint64_t seed, int index);

/// Entry distance along the ray origin + t * dir into the box, or a negative
/// value when the ray misses. `face` receives 0..5: +l, -l, +w, -w, top, bottom.
double ray_box_entry(const Box3D& b, const Eigen::Vector3d& dir, int* face = nullptr);

Scene sample_scene(const SceneSpec& spec, std::mt19937_64& rng);
Scene scene_at(const SceneSpec& spec, int index);

bool is_validation(int index);

void write_dataset(const SceneSpec& spec, int n_scenes, const std::string& out_dir);

struct Dataset {
  SceneSpec spec;
  int n_scenes{0};
  std::string root;
};

Dataset open_dataset(const std::string& dir);

/// Scene index formatted as the six-digit file stem.
std::string scene_stem(int index);

struct SceneFiles {
  CalibRecord calib;
  dataio::LabelFile labels;
  DepthMap depth;
  std::vector<RoIRecord> rois;
  FeatureGrid features;
};

SceneFiles load_scene(const Dataset& ds, int index);
SceneFiles as_files(const Scene& scene);

}  // namespace pct::synth

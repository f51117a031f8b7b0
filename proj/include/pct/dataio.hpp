#pragma once

// KITTI-style text formats and the small binary grid formats used on disk.
//
// Label line (15 fields, 16 with score):
//   type truncated occluded alpha left top right bottom h w l x y z rotation_y [score]
// Calibration: "KEY: v0 v1 ..." lines; the 3x4 "P2" projection supplies the
// intrinsics (entries (0,0), (1,1), (0,2), (1,2)) and the offsets (column 3).
// RoI line: type left top right bottom score gt_index   (gt_index -1 = none)
// DMAP:  "DMAP" | u32 width | u32 height | f32 values, row-major, NaN = invalid
// FGRD:  "FGRD" | u32 channels | u32 height | u32 width | u32 stride |
//        f32 values, channel-major then row-major
// All integers and floats are little-endian.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pct/geometry.hpp"

namespace pct::dataio {

using geometry::Box3D;
using geometry::CameraIntrinsics;
using geometry::DepthMap;
using geometry::FeatureGrid;
using geometry::RoI2D;

enum class Difficulty { Easy = 0, Moderate = 1, Hard = 2, Ignored = 3 };

const char* difficulty_name(Difficulty d);
Difficulty parse_difficulty(std::string_view name);

/// Category names; index is the class id used by boxes and RoIs.
inline constexpr std::array<std::string_view, 3> kClassNames{"Car", "Pedestrian", "Cyclist"};
int class_id_of(std::string_view name);  // -1 when unknown
std::string class_name_of(int class_id);

struct LabelRecord {
  std::string type{"Car"};
  double truncation{0};
  int occlusion{0};
  double alpha{0};
  double left{0};
  double top{0};
  double right{0};
  double bottom{0};
  double h{1};
  double w{1};
  double l{1};
  double x{0};
  double y{0};
  double z{0};
  double rotation_y{0};
  std::optional<double> score;

  double bbox_height() const { return bottom - top; }
  Box3D box() const;
  RoI2D roi() const;
};

struct LabelFile {
  std::vector<LabelRecord> objects;
  std::vector<LabelRecord> dont_care;
};

LabelFile parse_labels(std::string_view text);
/// Writes one line per record; when `require_score` is set every record must carry one.
std::string write_labels(const std::vector<LabelRecord>& records, bool require_score = false);

/// Detection files are label files with the score field mandatory.
std::vector<LabelRecord> parse_detections(std::string_view text);
std::string write_detections(const std::vector<LabelRecord>& records);

struct CalibRecord {
  CameraIntrinsics intrinsics;
  Eigen::Vector3d offsets{Eigen::Vector3d::Zero()};
};

CalibRecord parse_calib(std::string_view text);
std::string write_calib(const CalibRecord& calib);

struct RoIRecord {
  RoI2D roi;
  int gt_index{-1};
};

std::vector<RoIRecord> parse_rois(std::string_view text);
std::string write_rois(const std::vector<RoIRecord>& rois);

std::string write_depth_map(const DepthMap& map);
DepthMap read_depth_map(std::string_view bytes);

std::string write_feature_grid(const FeatureGrid& grid);
FeatureGrid read_feature_grid(std::string_view bytes);

/// KITTI difficulty from 2D box height, occlusion level and truncation.
Difficulty difficulty_of(const LabelRecord& r);

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

}  // namespace pct::dataio

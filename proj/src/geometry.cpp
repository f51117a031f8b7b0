#include "pct/geometry.hpp"

namespace pct::geometry {

CoordinatePatch patch_to_coordinates(const DepthMap& depth, const RoI2D& roi,
                                     const CameraIntrinsics& cam, int k) {
  if (!roi.valid()) throw DegenerateRoiError("patch_to_coordinates: RoI has no area");
  if (k <= 0) throw DegenerateRoiError("patch_to_coordinates: patch size must be positive");

  CoordinatePatch patch(k);
  const double cell_w = roi.width() / k;
  const double cell_h = roi.height() / k;
  for (int row = 0; row < k; ++row) {
    const double v = roi.top + (row + 0.5) * cell_h;
    const int src_row = static_cast<int>(std::floor(v));
    for (int col = 0; col < k; ++col) {
      const double u = roi.left + (col + 0.5) * cell_w;
      const int src_col = static_cast<int>(std::floor(u));
      const int idx = row * k + col;
      if (src_col < 0 || src_row < 0 || src_col >= depth.width || src_row >= depth.height) continue;
      const double z = depth.at(src_col, src_row);
      if (!DepthMap::is_valid(z)) continue;
      const Coordinate3D c = pixel_to_camera(Pixel{src_col + 0.5, src_row + 0.5, z}, cam);
      patch.points.row(idx) = c.transpose().array();
      patch.valid(idx) = true;
    }
  }
  return patch;
}

}  // namespace pct::geometry

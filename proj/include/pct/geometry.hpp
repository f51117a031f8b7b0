#pragma once

// Camera-frame geometry: pinhole back-projection, coordinate patches, oriented
// boxes and rotated-footprint IoU.
//
// Frame convention: x right, y down, z forward. Boxes are bottom-anchored: the
// location (x, y, z) is the center of the bottom face and the top face sits at
// y - h. Yaw theta rotates about the vertical (y) axis.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <utility>
#include <vector>

#include "pct/errors.hpp"

namespace pct::geometry {

template <typename Scalar>
using Vector2 = Eigen::Matrix<Scalar, 2, 1>;
template <typename Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;

template <typename Scalar>
struct CameraIntrinsicsT {
  Scalar f_u{1};
  Scalar f_v{1};
  Scalar u_p{0};
  Scalar v_p{0};

  bool valid() const { return f_u > Scalar(0) && f_v > Scalar(0); }

  Matrix3<Scalar> matrix() const {
    Matrix3<Scalar> k;
    k << f_u, 0, u_p, 0, f_v, v_p, 0, 0, 1;
    return k;
  }

  bool operator==(const CameraIntrinsicsT&) const = default;
};

template <typename Scalar>
struct PixelT {
  Scalar u{0};
  Scalar v{0};
  Scalar z{0};
};

template <typename Scalar>
using Coordinate3T = Vector3<Scalar>;

template <typename Scalar>
Scalar normalize_angle(Scalar theta) {
  constexpr Scalar pi = std::numbers::pi_v<Scalar>;
  Scalar wrapped = std::fmod(theta + pi, Scalar(2) * pi);
  if (wrapped < Scalar(0)) wrapped += Scalar(2) * pi;
  wrapped -= pi;
  // fmod can land exactly on +pi after the shift back.
  if (wrapped >= pi) wrapped -= Scalar(2) * pi;
  return wrapped;
}

template <typename Scalar>
struct Box3DT {
  Scalar x{0};
  Scalar y{0};
  Scalar z{0};
  Scalar h{1};
  Scalar w{1};
  Scalar l{1};
  Scalar theta{0};
  int class_id{0};
  Scalar score{1};

  Vector3<Scalar> location() const { return {x, y, z}; }
  void set_location(const Vector3<Scalar>& c) {
    x = c.x();
    y = c.y();
    z = c.z();
  }
  bool valid() const { return h > Scalar(0) && w > Scalar(0) && l > Scalar(0); }

  bool operator==(const Box3DT&) const = default;
};

template <typename Scalar>
using BevPolygonT = std::vector<Vector2<Scalar>>;

using CameraIntrinsics = CameraIntrinsicsT<double>;
using Pixel = PixelT<double>;
using Coordinate3D = Coordinate3T<double>;
using Box3D = Box3DT<double>;
using BevPolygon = BevPolygonT<double>;

/// Axis-aligned image region in pixels; `right`/`bottom` are exclusive edges.
struct RoI2D {
  double left{0};
  double top{0};
  double right{0};
  double bottom{0};
  int class_id{0};
  double score{1};

  double width() const { return right - left; }
  double height() const { return bottom - top; }
  bool valid() const {
    return std::isfinite(left) && std::isfinite(top) && std::isfinite(right) &&
           std::isfinite(bottom) && right > left && bottom > top;
  }
};

/// Dense depth image, row-major, meters. NaN marks a missing measurement.
struct DepthMap {
  int width{0};
  int height{0};
  Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> values;

  DepthMap() = default;
  DepthMap(int w, int h, double fill = std::numeric_limits<double>::quiet_NaN())
      : width(w), height(h), values(h, w) {
    values.setConstant(fill);
  }

  double at(int col, int row) const { return values(row, col); }
  double& at(int col, int row) { return values(row, col); }
  static bool is_valid(double depth) { return std::isfinite(depth) && depth > 0.0; }
};

/// Channel-major image-aligned feature grid. Cell (x, y) covers image pixels
/// [x * stride, (x + 1) * stride) horizontally, likewise vertically.
struct FeatureGrid {
  int channels{0};
  int height{0};
  int width{0};
  int stride{1};
  Eigen::ArrayXd values;

  FeatureGrid() = default;
  FeatureGrid(int c, int h, int w, int s) : channels(c), height(h), width(w), stride(s), values(c * h * w) {
    values.setZero();
  }

  double at(int c, int y, int x) const { return values((static_cast<Eigen::Index>(c) * height + y) * width + x); }
  double& at(int c, int y, int x) { return values((static_cast<Eigen::Index>(c) * height + y) * width + x); }
};

/// K x K grid of camera-frame points with a validity mask. Cell (row, col)
/// lives at index row * K + col.
struct CoordinatePatch {
  int size{0};
  Eigen::Array<double, Eigen::Dynamic, 3> points;
  Eigen::Array<bool, Eigen::Dynamic, 1> valid;

  CoordinatePatch() = default;
  explicit CoordinatePatch(int k) : size(k), points(k * k, 3), valid(k * k) {
    points.setZero();
    valid.setConstant(false);
  }

  int cells() const { return size * size; }
  int valid_count() const { return static_cast<int>(valid.count()); }
};

// ---------------------------------------------------------------------------
// Pinhole model

template <typename Scalar>
Coordinate3T<Scalar> pixel_to_camera(const PixelT<Scalar>& p, const CameraIntrinsicsT<Scalar>& cam) {
  if (!std::isfinite(p.z) || p.z <= Scalar(0)) {
    throw InvalidDepthError("pixel_to_camera: depth must be finite and positive");
  }
  return {(p.u - cam.u_p) * p.z / cam.f_u, (p.v - cam.v_p) * p.z / cam.f_v, p.z};
}

template <typename Scalar>
PixelT<Scalar> camera_to_pixel(const Coordinate3T<Scalar>& c, const CameraIntrinsicsT<Scalar>& cam) {
  if (!(c.z() > Scalar(0))) {
    throw BehindCameraError("camera_to_pixel: point is not in front of the camera");
  }
  return {c.x() * cam.f_u / c.z() + cam.u_p, c.y() * cam.f_v / c.z() + cam.v_p, c.z()};
}

/// Back-projects a K x K nearest-neighbour resampling of `depth` over `roi`.
/// Cell centers map to source pixels by flooring; each valid cell stores the
/// back-projection of its source pixel center. Cells outside the image or with
/// missing depth are masked.
CoordinatePatch patch_to_coordinates(const DepthMap& depth, const RoI2D& roi,
                                     const CameraIntrinsics& cam, int k);

// ---------------------------------------------------------------------------
// Boxes

template <typename Scalar>
Matrix3<Scalar> yaw_rotation(Scalar theta) {
  const Scalar c = std::cos(theta);
  const Scalar s = std::sin(theta);
  Matrix3<Scalar> r;
  r << c, 0, s, 0, 1, 0, -s, 0, c;
  return r;
}

/// Bottom face first (y = box.y), then top face (y = box.y - h), each in the
/// order (+l,+w), (-l,+w), (-l,-w), (+l,-w) of the box's local x/z axes.
template <typename Scalar>
std::array<Coordinate3T<Scalar>, 8> box_corners(const Box3DT<Scalar>& b) {
  const Scalar hl = b.l / Scalar(2);
  const Scalar hw = b.w / Scalar(2);
  const std::array<Scalar, 4> xs{hl, -hl, -hl, hl};
  const std::array<Scalar, 4> zs{hw, hw, -hw, -hw};
  const Matrix3<Scalar> r = yaw_rotation(b.theta);
  const Vector3<Scalar> t = b.location();
  std::array<Coordinate3T<Scalar>, 8> out;
  for (int i = 0; i < 4; ++i) {
    out[i] = r * Vector3<Scalar>(xs[i], Scalar(0), zs[i]) + t;
    out[i + 4] = r * Vector3<Scalar>(xs[i], -b.h, zs[i]) + t;
  }
  return out;
}

template <typename Scalar>
Scalar cross2(const Vector2<Scalar>& a, const Vector2<Scalar>& b) {
  return a.x() * b.y() - a.y() * b.x();
}

/// Shoelace area; positive for counter-clockwise winding in the (x, z) plane.
template <typename Scalar>
Scalar signed_area(const BevPolygonT<Scalar>& poly) {
  const std::size_t n = poly.size();
  if (n < 3) return Scalar(0);
  Scalar acc(0);
  for (std::size_t i = 0; i < n; ++i) acc += cross2(poly[i], poly[(i + 1) % n]);
  return acc / Scalar(2);
}

/// Ground-plane footprint as a counter-clockwise quad of (x, z) points.
template <typename Scalar>
BevPolygonT<Scalar> bev_footprint(const Box3DT<Scalar>& b) {
  const Scalar c = std::cos(b.theta);
  const Scalar s = std::sin(b.theta);
  const Scalar hl = b.l / Scalar(2);
  const Scalar hw = b.w / Scalar(2);
  const std::array<Scalar, 4> xs{hl, -hl, -hl, hl};
  const std::array<Scalar, 4> zs{hw, hw, -hw, -hw};
  BevPolygonT<Scalar> poly(4);
  for (int i = 0; i < 4; ++i) {
    poly[i] = {b.x + c * xs[i] + s * zs[i], b.z - s * xs[i] + c * zs[i]};
  }
  if (signed_area(poly) < Scalar(0)) std::reverse(poly.begin(), poly.end());
  return poly;
}

/// Sutherland-Hodgman clip of `subject` against the convex CCW polygon `clip`.
/// Points within 1e-9 m of a clip edge count as inside.
template <typename Scalar>
BevPolygonT<Scalar> clip_convex(const BevPolygonT<Scalar>& subject, const BevPolygonT<Scalar>& clip) {
  constexpr Scalar tol = Scalar(1e-9);
  BevPolygonT<Scalar> output = subject;
  const std::size_t m = clip.size();
  for (std::size_t e = 0; e < m && !output.empty(); ++e) {
    const Vector2<Scalar>& a = clip[e];
    const Vector2<Scalar>& b = clip[(e + 1) % m];
    const Vector2<Scalar> edge = b - a;
    const Scalar len = edge.norm();
    if (len <= tol) continue;
    auto side = [&](const Vector2<Scalar>& p) { return cross2(edge, Vector2<Scalar>(p - a)) / len; };

    BevPolygonT<Scalar> input;
    input.swap(output);
    Vector2<Scalar> prev = input.back();
    Scalar prev_side = side(prev);
    for (const Vector2<Scalar>& cur : input) {
      const Scalar cur_side = side(cur);
      const bool cur_in = cur_side >= -tol;
      const bool prev_in = prev_side >= -tol;
      if (cur_in != prev_in) {
        const Scalar t = prev_side / (prev_side - cur_side);
        output.push_back(prev + t * (cur - prev));
      }
      if (cur_in) output.push_back(cur);
      prev = cur;
      prev_side = cur_side;
    }
  }
  return output;
}

namespace detail {

template <typename Scalar>
void require_footprint(const Box3DT<Scalar>& b) {
  if (!(b.l > Scalar(0)) || !(b.w > Scalar(0)) || !std::isfinite(b.x) || !std::isfinite(b.z) ||
      !std::isfinite(b.theta)) {
    throw DegenerateBoxError("box has a degenerate ground-plane footprint");
  }
}

template <typename Scalar>
void require_volume(const Box3DT<Scalar>& b) {
  require_footprint(b);
  if (!(b.h > Scalar(0)) || !std::isfinite(b.y)) {
    throw DegenerateBoxError("box has a degenerate vertical extent");
  }
}

// Orders a pair canonically so IoU is bit-exactly symmetric.
template <typename Scalar>
bool precedes(const Box3DT<Scalar>& a, const Box3DT<Scalar>& b) {
  const std::array<Scalar, 7> ka{a.x, a.y, a.z, a.h, a.w, a.l, a.theta};
  const std::array<Scalar, 7> kb{b.x, b.y, b.z, b.h, b.w, b.l, b.theta};
  return ka < kb;
}

// Vertical extent of a bottom-anchored box, computed the same way for the
// volume and the overlap so that identical boxes give an IoU of exactly 1.
template <typename Scalar>
std::pair<Scalar, Scalar> vertical_range(const Box3DT<Scalar>& b) {
  return {b.y - b.h, b.y};
}

}  // namespace detail

template <typename Scalar>
Scalar bev_intersection_area(const Box3DT<Scalar>& a, const Box3DT<Scalar>& b) {
  const BevPolygonT<Scalar> pa = bev_footprint(a);
  const BevPolygonT<Scalar> pb = bev_footprint(b);
  const BevPolygonT<Scalar> inter = clip_convex(pa, pb);
  const Scalar area = signed_area(inter);
  // Edge or vertex contact has measure zero.
  return area > Scalar(1e-12) ? area : Scalar(0);
}

template <typename Scalar>
Scalar bev_iou(const Box3DT<Scalar>& a_in, const Box3DT<Scalar>& b_in) {
  detail::require_footprint(a_in);
  detail::require_footprint(b_in);
  const bool swap = detail::precedes(b_in, a_in);
  const Box3DT<Scalar>& a = swap ? b_in : a_in;
  const Box3DT<Scalar>& b = swap ? a_in : b_in;
  const Scalar inter = bev_intersection_area(a, b);
  if (inter <= Scalar(0)) return Scalar(0);
  const Scalar area_a = signed_area(bev_footprint(a));
  const Scalar area_b = signed_area(bev_footprint(b));
  const Scalar uni = area_a + area_b - inter;
  return std::clamp(inter / uni, Scalar(0), Scalar(1));
}

template <typename Scalar>
Scalar iou_3d(const Box3DT<Scalar>& a_in, const Box3DT<Scalar>& b_in) {
  detail::require_volume(a_in);
  detail::require_volume(b_in);
  const bool swap = detail::precedes(b_in, a_in);
  const Box3DT<Scalar>& a = swap ? b_in : a_in;
  const Box3DT<Scalar>& b = swap ? a_in : b_in;

  const auto [a_top, a_bottom] = detail::vertical_range(a);
  const auto [b_top, b_bottom] = detail::vertical_range(b);
  const Scalar overlap_h = std::min(a_bottom, b_bottom) - std::max(a_top, b_top);
  if (overlap_h <= Scalar(0)) return Scalar(0);
  const Scalar inter_area = bev_intersection_area(a, b);
  if (inter_area <= Scalar(0)) return Scalar(0);

  const Scalar vol_a = signed_area(bev_footprint(a)) * (a_bottom - a_top);
  const Scalar vol_b = signed_area(bev_footprint(b)) * (b_bottom - b_top);
  const Scalar inter = inter_area * overlap_h;
  return std::clamp(inter / (vol_a + vol_b - inter), Scalar(0), Scalar(1));
}

/// True when the camera-frame point lies inside `b` grown by `margin` on every side.
template <typename Scalar>
bool point_in_box(const Box3DT<Scalar>& b, const Vector3<Scalar>& p, Scalar margin = Scalar(0)) {
  const Vector3<Scalar> local = yaw_rotation(b.theta).transpose() * (p - b.location());
  return std::abs(local.x()) <= b.l / Scalar(2) + margin && std::abs(local.z()) <= b.w / Scalar(2) + margin &&
         local.y() <= margin && local.y() >= -b.h - margin;
}

}  // namespace pct::geometry

#pragma once

// Global context encoding and the 3D box network G.
//
// Context: RoIAlign crops a C x K x K block of the image feature grid, a
// strided convolutional encoder reduces it to a vector, and that vector is
// concatenated after the pooled coordinate features of G.

#include <Eigen/Dense>

#include <optional>
#include <random>
#include <vector>

#include "pct/clb.hpp"
#include "pct/engine.hpp"
#include "pct/geometry.hpp"

namespace pct::boxhead {

using engine::Matrix;
using engine::Network;
using engine::Tensor;
using geometry::Box3D;
using geometry::CoordinatePatch;
using geometry::FeatureGrid;
using geometry::RoI2D;

inline constexpr int kRoIAlignSize = 16;
inline constexpr int kContextSize = 64;
inline constexpr int kBoxOutputs = 8;  // center residual (3), log dims (3), sin, cos

/// Bilinear crop of `grid` over `roi` (image pixels, scaled by 1/stride) at
/// out_size x out_size bin centers. Feature cell (x, y) is centered at
/// (x + 0.5, y + 0.5) in grid units; samples are clamped to the grid.
/// Result is channel-major, length C * out_size * out_size.
Eigen::VectorXd roi_align(const FeatureGrid& grid, const RoI2D& roi, int out_size = kRoIAlignSize);

/// Bilinear value at a continuous grid location (grid units, cell centers at +0.5).
double bilinear_sample(const FeatureGrid& grid, int channel, double gx, double gy);

struct EncoderConfig {
  int in_channels{64};
  int channels{64};
  int crop_size{kRoIAlignSize};
};

/// conv 3x3 stride 4 pad 1, relu, conv 3x3 stride 4 pad 1, relu, conv 1x1, flatten.
std::vector<engine::LayerSpec> encoder_specs(const EncoderConfig& cfg);
Network make_encoder(const EncoderConfig& cfg);

/// ContextVector from a single crop.
Eigen::VectorXd gce_encode(Network& encoder, const Eigen::VectorXd& crop);

/// Coordinate features first, context second.
Eigen::VectorXd fuse(const Eigen::VectorXd& coord_feature, const Eigen::VectorXd& ctx);

struct BoxNetwork {
  Network trunk;
  Network head;  // concat_input(context), affine, relu, affine -> 8 outputs

  static BoxNetwork make(const clb::TrunkConfig& trunk, int context_size = kContextSize, int hidden = 64);
  void initialize(std::mt19937_64& rng);
  std::vector<engine::Parameter*> parameters();
};

struct BoxPrediction {
  Eigen::Vector3d center_residual{Eigen::Vector3d::Zero()};
  Eigen::Vector3d log_dims{Eigen::Vector3d::Zero()};  // log(dims / anchor), order (h, w, l)
  Eigen::Vector3d dims{Eigen::Vector3d::Ones()};
  double sin_theta{0};
  double cos_theta{0};
  Eigen::Vector3d center{Eigen::Vector3d::Zero()};  // localization estimate + residual

  double theta() const;
  Box3D box(int class_id = 0, double score = 1.0) const;
};

/// Decodes one column of G's raw output.
BoxPrediction decode_box(const Eigen::Ref<const Eigen::VectorXd>& raw, const Eigen::Vector3d& estimate,
                         const Eigen::Vector3d& anchor);

/// Runs G on the re-centered patch c_T. `estimate` is the localization
/// estimate c_T was centered on; an absent context is a zero vector.
BoxPrediction box_forward(BoxNetwork& g, const CoordinatePatch& c_t, const Eigen::Vector3d& estimate,
                          const std::optional<Eigen::VectorXd>& ctx, const Eigen::Vector3d& anchor);

struct BoxLossTerms {
  double center{0};
  double dims{0};
  double orientation{0};
  double total() const { return center + dims + orientation; }
};

/// Smooth-L1 on the center, on log(dim / gt dim) and on (sin, cos) against the
/// ground-truth pair, unweighted.
BoxLossTerms box_loss(const BoxPrediction& pred, const Box3D& gt);

/// Gradient of box_loss w.r.t. the 8 raw outputs and the localization estimate
/// (the estimate gradient equals the center-residual gradient).
Eigen::Matrix<double, kBoxOutputs, 1> box_loss_grad(const BoxPrediction& pred, const Box3D& gt);

}  // namespace pct::boxhead

#include "pct/boxhead.hpp"

#include <cmath>

namespace pct::boxhead {

using engine::LayerSpec;
using engine::Shape;

double bilinear_sample(const FeatureGrid& grid, int channel, double gx, double gy) {
  const double ix = std::clamp(gx - 0.5, 0.0, static_cast<double>(grid.width - 1));
  const double iy = std::clamp(gy - 0.5, 0.0, static_cast<double>(grid.height - 1));
  const int x0 = static_cast<int>(std::floor(ix));
  const int y0 = static_cast<int>(std::floor(iy));
  const int x1 = std::min(x0 + 1, grid.width - 1);
  const int y1 = std::min(y0 + 1, grid.height - 1);
  const double fx = ix - x0;
  const double fy = iy - y0;
  const double top = (1 - fx) * grid.at(channel, y0, x0) + fx * grid.at(channel, y0, x1);
  const double bottom = (1 - fx) * grid.at(channel, y1, x0) + fx * grid.at(channel, y1, x1);
  return (1 - fy) * top + fy * bottom;
}

Eigen::VectorXd roi_align(const FeatureGrid& grid, const RoI2D& roi, int out_size) {
  if (!roi.valid()) throw DegenerateRoiError("roi_align: RoI has no area");
  if (out_size <= 0) throw DegenerateRoiError("roi_align: output size must be positive");
  if (grid.width <= 0 || grid.height <= 0 || grid.channels <= 0) throw ShapeError("roi_align: empty feature grid");
  const double scale = 1.0 / grid.stride;
  const double x0 = roi.left * scale;
  const double y0 = roi.top * scale;
  const double bin_w = roi.width() * scale / out_size;
  const double bin_h = roi.height() * scale / out_size;
  const int cells = out_size * out_size;
  Eigen::VectorXd out(static_cast<Eigen::Index>(grid.channels) * cells);
  for (int c = 0; c < grid.channels; ++c) {
    for (int i = 0; i < out_size; ++i) {
      const double gy = y0 + (i + 0.5) * bin_h;
      for (int j = 0; j < out_size; ++j) {
        const double gx = x0 + (j + 0.5) * bin_w;
        out(static_cast<Eigen::Index>(c) * cells + i * out_size + j) = bilinear_sample(grid, c, gx, gy);
      }
    }
  }
  return out;
}

std::vector<LayerSpec> encoder_specs(const EncoderConfig& cfg) {
  return {LayerSpec::conv2d(cfg.in_channels, cfg.channels, 3, 4, 1),
          LayerSpec::relu(),
          LayerSpec::conv2d(cfg.channels, cfg.channels, 3, 4, 1),
          LayerSpec::relu(),
          LayerSpec::conv2d(cfg.channels, cfg.channels, 1, 1, 0),
          LayerSpec::flatten()};
}

Network make_encoder(const EncoderConfig& cfg) {
  Network net(Shape{cfg.in_channels, cfg.crop_size, cfg.crop_size}, encoder_specs(cfg));
  if (net.output_shape().size() != cfg.channels) {
    throw ShapeError("encoder: crop size " + std::to_string(cfg.crop_size) + " does not reduce to a vector");
  }
  return net;
}

Eigen::VectorXd gce_encode(Network& encoder, const Eigen::VectorXd& crop) {
  if (crop.size() != encoder.input_shape().size()) {
    throw ShapeError("gce_encode: crop has " + std::to_string(crop.size()) + " values, encoder expects " +
                     encoder.input_shape().str());
  }
  return encoder.forward(Tensor(encoder.input_shape(), Matrix(crop))).values.col(0);
}

Eigen::VectorXd fuse(const Eigen::VectorXd& coord_feature, const Eigen::VectorXd& ctx) {
  Eigen::VectorXd out(coord_feature.size() + ctx.size());
  out << coord_feature, ctx;
  return out;
}

BoxNetwork BoxNetwork::make(const clb::TrunkConfig& trunk, int context_size, int hidden) {
  BoxNetwork g;
  const int feat = trunk.feature_size();
  g.trunk = Network(clb::patch_shape(trunk.patch_size), clb::trunk_specs(trunk));
  g.head = Network(Shape{feat, 1, 1}, {LayerSpec::concat_input(context_size), LayerSpec::affine(feat + context_size, hidden),
                                       LayerSpec::relu(), LayerSpec::affine(hidden, kBoxOutputs)});
  return g;
}

void BoxNetwork::initialize(std::mt19937_64& rng) {
  trunk.initialize(rng);
  head.initialize(rng);
}

std::vector<engine::Parameter*> BoxNetwork::parameters() {
  std::vector<engine::Parameter*> out = trunk.parameters();
  for (engine::Parameter* p : head.parameters()) out.push_back(p);
  return out;
}

double BoxPrediction::theta() const { return std::atan2(sin_theta, cos_theta); }

Box3D BoxPrediction::box(int class_id, double score) const {
  Box3D b;
  b.set_location(center);
  b.h = dims(0);
  b.w = dims(1);
  b.l = dims(2);
  b.theta = geometry::normalize_angle(theta());
  b.class_id = class_id;
  b.score = score;
  return b;
}

BoxPrediction decode_box(const Eigen::Ref<const Eigen::VectorXd>& raw, const Eigen::Vector3d& estimate,
                         const Eigen::Vector3d& anchor) {
  BoxPrediction p;
  p.center_residual = raw.segment<3>(0);
  p.log_dims = raw.segment<3>(3);
  p.dims = anchor.array() * p.log_dims.array().exp();
  p.sin_theta = raw(6);
  p.cos_theta = raw(7);
  p.center = estimate + p.center_residual;
  return p;
}

BoxPrediction box_forward(BoxNetwork& g, const CoordinatePatch& c_t, const Eigen::Vector3d& estimate,
                          const std::optional<Eigen::VectorXd>& ctx, const Eigen::Vector3d& anchor) {
  const CoordinatePatch* ptr = &c_t;
  const Tensor in = clb::patch_tensor(std::span<const CoordinatePatch* const>(&ptr, 1), Matrix::Zero(3, 1));
  const Tensor feat = g.trunk.forward(in);
  const int side = g.head.side_size();
  Tensor context(Shape{side, 1, 1}, 1);
  if (ctx) {
    if (ctx->size() != side) throw ShapeError("box_forward: context length mismatch");
    context.values.col(0) = *ctx;
  }
  const Tensor raw = g.head.forward(feat, &context);
  return decode_box(raw.values.col(0), estimate, anchor);
}

BoxLossTerms box_loss(const BoxPrediction& pred, const Box3D& gt) {
  BoxLossTerms t;
  const Eigen::Vector3d gt_dims(gt.h, gt.w, gt.l);
  for (int i = 0; i < 3; ++i) {
    t.center += clb::smooth_l1(pred.center(i) - gt.location()(i));
    t.dims += clb::smooth_l1(std::log(pred.dims(i) / gt_dims(i)));
  }
  t.orientation = clb::smooth_l1(pred.sin_theta - std::sin(gt.theta)) + clb::smooth_l1(pred.cos_theta - std::cos(gt.theta));
  return t;
}

Eigen::Matrix<double, kBoxOutputs, 1> box_loss_grad(const BoxPrediction& pred, const Box3D& gt) {
  Eigen::Matrix<double, kBoxOutputs, 1> g;
  const Eigen::Vector3d gt_dims(gt.h, gt.w, gt.l);
  for (int i = 0; i < 3; ++i) {
    g(i) = clb::smooth_l1_grad(pred.center(i) - gt.location()(i));
    g(3 + i) = clb::smooth_l1_grad(std::log(pred.dims(i) / gt_dims(i)));
  }
  g(6) = clb::smooth_l1_grad(pred.sin_theta - std::sin(gt.theta));
  g(7) = clb::smooth_l1_grad(pred.cos_theta - std::cos(gt.theta));
  return g;
}

}  // namespace pct::boxhead

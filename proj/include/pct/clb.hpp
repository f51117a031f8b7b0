#pragma once

// Confidence-aware localization boosting: a stack of small localization
// networks, each regressing a center residual from a coordinate patch that has
// been re-centered on the running estimate, with a learned per-stage confidence
// weighting its loss term.

#include <Eigen/Dense>

#include <random>
#include <span>
#include <string>
#include <vector>

#include "pct/engine.hpp"
#include "pct/geometry.hpp"

namespace pct::clb {

using engine::Matrix;
using engine::Network;
using engine::Tensor;
using geometry::CoordinatePatch;

enum class LossKernel { SmoothL1 };

struct BoostConfig {
  int stages{3};
  std::vector<double> gamma{1.0, 1.0, 1.0, 1.0};  // gamma[0] weighs the initial estimate
  double lambda_s{1.0};
  LossKernel kernel{LossKernel::SmoothL1};
  bool use_confidence{true};

  static BoostConfig uniform(int stages, double lambda_s = 1.0, bool use_confidence = true);
  void validate() const;
};

struct StageOutput {
  Eigen::Vector3d delta{Eigen::Vector3d::Zero()};
  double confidence{0.5};
};

struct BoostTrace {
  Eigen::Vector3d initial{Eigen::Vector3d::Zero()};
  std::vector<StageOutput> stages;
  /// patches[t] is the raw patch minus cumulative[t], t = 0..T.
  std::vector<CoordinatePatch> patches;
  /// cumulative[t] = gamma_0 * initial + sum_{i<=t} gamma_i * delta_i.
  std::vector<Eigen::Vector3d> cumulative;

  const Eigen::Vector3d& final_estimate() const { return cumulative.back(); }
};

/// Convolutional trunk shared by the weak learners and the box network: a
/// stack of conv + relu layers over the (x, y, z, mask) patch, then global
/// average pooling.
struct TrunkConfig {
  int patch_size{8};
  std::vector<int> channels{32, 64, 64};
  int kernel{3};
  int stride{2};
  int padding{1};

  int feature_size() const { return channels.back(); }
};

std::vector<engine::LayerSpec> trunk_specs(const TrunkConfig& cfg);
engine::Shape patch_shape(int patch_size);

/// One weak learner F_t: trunk, residual head and the confidence head
/// (three affine layers and a sigmoid).
struct WeakLearner {
  Network trunk;
  Network delta_head;
  Network conf_head;

  static WeakLearner make(const TrunkConfig& trunk, const std::vector<int>& conf_hidden);
  void initialize(std::mt19937_64& rng);
  std::vector<engine::Parameter*> parameters();
};

struct BoostStack {
  TrunkConfig trunk;
  std::vector<int> conf_hidden{32, 16};
  std::vector<WeakLearner> learners;

  static BoostStack make(int stages, const TrunkConfig& trunk, const std::vector<int>& conf_hidden = {32, 16});
  void initialize(std::mt19937_64& rng);
};

/// Per-axis median over valid cells; mean of the middle pair for even counts.
Eigen::Vector3d initial_center(const CoordinatePatch& c0);

/// Translates every valid cell by -center; the mask is unchanged.
CoordinatePatch shift_patch(const CoordinatePatch& c0, const Eigen::Vector3d& center);

/// Network input for a batch: channels (x, y, z, mask) of each patch after
/// subtracting the matching column of `centers` from its valid cells. Invalid
/// cells are zero in every channel.
Tensor patch_tensor(std::span<const CoordinatePatch* const> patches, const Matrix& centers);

/// Gradient of the loss w.r.t. the subtracted centers given the gradient
/// w.r.t. the patch tensor: minus the per-axis sum over valid cells.
Matrix shift_backward(std::span<const CoordinatePatch* const> patches, const Tensor& input_grad);

StageOutput stage_forward(WeakLearner& learner, const CoordinatePatch& c);

BoostTrace clb_forward(BoostStack& stack, const CoordinatePatch& c0, const BoostConfig& cfg);

double smooth_l1(double x);
double smooth_l1_grad(double x);
/// Psi: smooth-L1 per axis of (estimate - target), summed.
double localization_loss(const Eigen::Vector3d& target, const Eigen::Vector3d& estimate);
Eigen::Vector3d localization_loss_grad(const Eigen::Vector3d& target, const Eigen::Vector3d& estimate);

inline constexpr double kConfidenceClamp = 1e-6;
double clamp_confidence(double s);

struct ClbLoss {
  double total{0};
  double weighted{0};  // sum_t s_t * Psi_t
  double penalty{0};  // lambda_s * prod_t (1 - s_t)
  std::vector<double> psi;
};

/// sum_t s_t * Psi(gt, cumulative[t]) + lambda_s * prod_t (1 - s_t), with s_t
/// clamped to [1e-6, 1 - 1e-6]. Without confidence every s_t is 1 and the
/// penalty is dropped.
ClbLoss clb_loss(const BoostTrace& trace, const Eigen::Vector3d& gt_center, const BoostConfig& cfg);
ClbLoss clb_loss(std::span<const double> confidences, std::span<const double> psi, const BoostConfig& cfg);

/// dL/ds_t = Psi_t - lambda_s * prod_{j != t} (1 - s_j), zero where the clamp is active.
std::vector<double> confidence_gradient(std::span<const double> confidences, std::span<const double> psi,
                                        const BoostConfig& cfg);

struct StageErrorRow {
  std::string stage;
  char axis{'x'};
  double error{0};
};

/// Signed errors (estimate - gt) per stage and axis, labelled loc.1 .. loc.T;
/// when `final_centers` is given, the box network output is appended as loc.T+1.
std::vector<StageErrorRow> export_stage_errors(std::span<const BoostTrace> traces,
                                               std::span<const Eigen::Vector3d> gts,
                                               std::span<const Eigen::Vector3d> final_centers = {});
std::string stage_errors_csv(std::span<const StageErrorRow> rows);

}  // namespace pct::clb
